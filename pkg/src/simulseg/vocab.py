"""Shared vocabulary conventions: four reserved ids ahead of the content tokens."""

PAD = 0
BOS = 1
EOS = 2
UNK = 3
NUM_SPECIALS = 4

_SPECIAL_NAMES = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", UNK: "<unk>"}


def token_str(token_id: int) -> str:
    return _SPECIAL_NAMES.get(token_id, str(token_id))


def total_vocab(content_size: int) -> int:
    return content_size + NUM_SPECIALS
