import props


def test_reverse_trace_is_forward_mirrored():
    assert props.check_reverse_reversal(100) >= 100


def test_next_index_is_a_bijection():
    assert props.check_next_index_bijection(200) >= 200


def test_decoder_respects_buffer_bounds():
    assert props.check_decoder_truncation(200) >= 200


def test_emulator_is_deterministic():
    assert props.check_emulator_determinism(100) >= 100
