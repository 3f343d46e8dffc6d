"""ISO 15919 romanization of Devanagari, Bengali and Tamil.

Strict letter-for-letter mapping: every consonant carries an inherent ``a``
unless a vowel sign or virama follows, and word-final ``a`` is kept
(सूरज -> sūraja). Tables live in ``resources/translit/<script>.tsv`` as
``codepoints<TAB>latin<TAB>category`` rows.
"""
from __future__ import annotations

import enum
import logging
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional

logger = logging.getLogger(__name__)

CATEGORIES = {
    "consonant",
    "dead_consonant",
    "vowel",
    "vowel_sign",
    "virama",
    "nukta",
    "sign",
    "digit",
    "punct",
}

_JOINERS = {"\u200c", "\u200d"}  # ZWNJ, ZWJ


class Script(str, enum.Enum):
    DEVANAGARI = "devanagari"
    BENGALI = "bengali"
    TAMIL = "tamil"


BLOCKS = {
    Script.DEVANAGARI: (0x0900, 0x097F),
    Script.BENGALI: (0x0980, 0x09FF),
    Script.TAMIL: (0x0B80, 0x0BFF),
}

LOCALE_SCRIPTS = {"hi": Script.DEVANAGARI, "bn": Script.BENGALI, "ta": Script.TAMIL}


def script_for_locale(locale: str) -> Script:
    lang = locale.split("-")[0].split("_")[0].lower()
    try:
        return LOCALE_SCRIPTS[lang]
    except KeyError:
        raise ValueError(f"no transliteration script for locale {locale!r}") from None


@dataclass(frozen=True)
class ScriptTable:
    script: Script
    entries: Mapping[str, tuple[str, str]]  # NFC key -> (latin, category)
    max_key: int

    def in_block(self, ch: str) -> bool:
        lo, hi = BLOCKS[self.script]
        return lo <= ord(ch) <= hi

    def check(self) -> None:
        seen: dict[tuple[str, str], str] = {}
        for key, (latin, cat) in self.entries.items():
            if cat not in CATEGORIES:
                raise ValueError(f"{self.script.value}: unknown category {cat!r}")
            if unicodedata.normalize("NFC", latin) != latin:
                raise ValueError(f"{self.script.value}: output {latin!r} is not NFC")
            if latin and cat not in ("digit", "punct"):
                other = seen.setdefault((cat, latin), key)
                if other != key:
                    raise ValueError(f"{self.script.value}: {latin!r} assigned twice in {cat}")


def parse_table(script: Script, text: str) -> ScriptTable:
    entries = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise ValueError(f"{script.value} table line {line_no}: expected 3 columns")
        cps, latin, cat = cols
        key = unicodedata.normalize("NFC", "".join(chr(int(cp, 16)) for cp in cps.split()))
        entries[key] = (latin, cat)
    table = ScriptTable(script, entries, max(len(k) for k in entries))
    table.check()
    return table


@lru_cache(maxsize=None)
def _bundled(script: Script) -> ScriptTable:
    text = resources.files("xltransfer").joinpath(f"resources/translit/{script.value}.tsv").read_text("utf-8")
    return parse_table(script, text)


def load_table(script: Script | str, table_dir: Optional[str | Path] = None) -> ScriptTable:
    """Bundled table, or ``<table_dir>/<script>.tsv`` when auditing an override."""
    script = Script(script)
    if table_dir is None:
        return _bundled(script)
    return parse_table(script, (Path(table_dir) / f"{script.value}.tsv").read_text("utf-8"))


def transliterate(
    text: str,
    script: Script | str,
    table: Optional[ScriptTable] = None,
    warnings: Optional[list[str]] = None,
) -> str:
    if table is None:
        table = load_table(script)
    text = unicodedata.normalize("NFC", text)
    out: list[str] = []
    pending = False  # last consonant still owes its inherent vowel
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in _JOINERS:
            i += 1
            continue
        hit = None
        for size in range(min(table.max_key, n - i), 0, -1):
            hit = table.entries.get(text[i : i + size])
            if hit is not None:
                i += size
                break
        if hit is None:
            if pending:
                out.append("a")
                pending = False
            if table.in_block(ch) and warnings is not None:
                warnings.append(f"U+{ord(ch):04X} has no {table.script.value} mapping")
            out.append(ch)
            i += 1
            continue
        latin, cat = hit
        if cat == "vowel_sign":
            out.append(latin)
            pending = False
        elif cat == "virama":
            pending = False
        elif cat == "nukta":
            pass
        else:
            if pending:
                out.append("a")
            out.append(latin)
            pending = cat == "consonant"
    if pending:
        out.append("a")
    return unicodedata.normalize("NFC", "".join(out))


def transliterate_tokens(tokens, script: Script | str) -> list[str]:
    """Per-token transliteration; token count is preserved."""
    table = load_table(script)
    return [transliterate(tok, table.script, table) for tok in tokens]
