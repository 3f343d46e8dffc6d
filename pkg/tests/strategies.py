from hypothesis import strategies as st

from xltransfer.codec import LabeledSentence

_TOKEN_ALPHABET = st.characters(
    blacklist_categories=("Cs", "Zs", "Zl", "Zp", "Cc"),
    blacklist_characters="[]\u0085᠎​  ﻿",
)
tokens = st.text(_TOKEN_ALPHABET, min_size=1, max_size=8).filter(lambda t: not any(c.isspace() for c in t))
label_names = st.from_regex(r"[a-z][a-z_]{0,14}", fullmatch=True)


@st.composite
def labeled_sentences(draw, labels=None, max_size=12):
    toks = draw(st.lists(tokens, min_size=1, max_size=max_size))
    choice = st.sampled_from(sorted(labels)) if labels is not None else label_names
    tags = draw(st.lists(st.one_of(st.none(), choice), min_size=len(toks), max_size=len(toks)))
    return LabeledSentence(tuple(toks), tuple(tags))
