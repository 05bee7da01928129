import pytest

from dynaseal.engine import MockEngine, UnknownModel, count_prompt_tokens


def make_engine(**kw):
    return MockEngine(["m-small", "m-large"], **kw)


def messages(text):
    return [{"role": "user", "content": text}]


def test_generation_is_deterministic_across_runs():
    a = list(make_engine(seed=7).generate("m-small", messages("a b c"), 100))
    b = list(make_engine(seed=7).generate("m-small", messages("a b c"), 100))
    assert a == b
    assert len(a) >= 1


def test_seed_changes_output():
    a = list(make_engine(seed=1).generate("m-small", messages("a b c"), None))
    b = list(make_engine(seed=2).generate("m-small", messages("a b c"), None))
    assert a != b


def test_model_changes_output():
    a = list(make_engine().generate("m-small", messages("same prompt"), None))
    b = list(make_engine().generate("m-large", messages("same prompt"), None))
    assert a != b


def test_uncapped_length_equals_natural_length():
    eng = make_engine()
    natural = eng.natural_length("m-small", messages("a b c"))
    chunks = list(eng.generate("m-small", messages("a b c"), None))
    assert len(chunks) == natural


def test_cap_truncates():
    eng = make_engine(natural_min=20, natural_max=20)
    chunks = list(eng.generate("m-small", messages("x"), 8))
    assert len(chunks) == 8


def test_cap_of_one_yields_one_chunk():
    eng = make_engine()
    assert len(list(eng.generate("m-small", messages("x"), 1))) == 1


def test_cap_above_natural_is_not_binding():
    eng = make_engine(natural_min=3, natural_max=3)
    assert len(list(eng.generate("m-small", messages("x"), 1000))) == 3


def test_natural_length_respects_bounds():
    eng = make_engine(natural_min=5, natural_max=9)
    for i in range(50):
        n = eng.natural_length("m-small", messages(f"prompt {i}"))
        assert 5 <= n <= 9


def test_pinned_bounds_give_constant_length():
    eng = make_engine(natural_min=12, natural_max=12)
    assert eng.natural_length("m-small", messages("whatever")) == 12


def test_unknown_model():
    with pytest.raises(UnknownModel):
        list(make_engine().generate("m-x", messages("hi"), 4))
    with pytest.raises(UnknownModel):
        make_engine().natural_length("m-x", messages("hi"))


def test_call_counter_counts_generations_only():
    eng = make_engine()
    assert eng.calls == 0
    eng.natural_length("m-small", messages("x"))
    assert eng.calls == 0
    list(eng.generate("m-small", messages("x"), 2))
    assert eng.calls == 1


def test_prompt_token_count_is_whitespace_split():
    assert count_prompt_tokens(messages("a b c")) == 3
    assert count_prompt_tokens([{"role": "system", "content": "be  kind"},
                                {"role": "user", "content": "hello there world"}]) == 5
    assert count_prompt_tokens(messages("")) == 0


def test_chunks_are_words_with_trailing_space():
    for chunk in make_engine().generate("m-small", messages("q"), 5):
        assert chunk.endswith(" ")
        assert chunk.strip().isalpha()
