import pytest

from grpolab.vocab import BOS, EOS, PAD, UNK, Vocabulary


@pytest.fixture
def vocab():
    return Vocabulary.build(list("abc "), ["taskA", "taskB"])


def test_ids_dense_and_specials_distinct(vocab):
    assert [vocab.symbol_to_id[s] for s in vocab.id_to_symbol] == list(range(len(vocab)))
    assert len({PAD, BOS, EOS, UNK}) == 4


def test_round_trip_on_in_vocab_text(vocab):
    text = "abc cab a"
    assert vocab.decode(vocab.encode(text)) == text


def test_out_of_vocab_maps_to_unk(vocab):
    assert vocab.encode("z") == [UNK]
    assert vocab.decode([UNK]) == ""


def test_language_tags(vocab):
    assert vocab.tag_id("taskA") != vocab.tag_id("taskB")
    assert vocab.is_control(vocab.tag_id("taskA"))
    with pytest.raises(KeyError):
        vocab.tag_id("nope")


def test_json_round_trip(vocab):
    clone = Vocabulary.from_json(vocab.to_json())
    assert clone.id_to_symbol == vocab.id_to_symbol
    assert clone.lang_tags == vocab.lang_tags
