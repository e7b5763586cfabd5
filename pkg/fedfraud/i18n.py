"""Localized coordinator messages: rejection reasons and acknowledgements."""

import json
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple

DEFAULT_LOCALE = "en"
SUPPORTED_LOCALES = ("en", "de", "es")

LOCALE_DIR = Path(__file__).parent / "locales"


class _KeepMissing(dict):
    def __missing__(self, key: str) -> str:
        return "{" + key + "}"


@lru_cache(maxsize=None)
def messages(locale: str) -> Dict[str, str]:
    path = LOCALE_DIR / f"{locale}.json"
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def t(key: str, locale: str = DEFAULT_LOCALE, **context) -> str:
    """Message for ``key`` in ``locale``, falling back to English, then to the key itself.

    Placeholders without a value in ``context`` are left as written.
    """
    template = messages(locale).get(key) or messages(DEFAULT_LOCALE).get(key, key)
    return template.format_map(_KeepMissing({k: str(v) for k, v in context.items()}))


def _ranked_languages(header: str) -> List[Tuple[float, int, str]]:
    ranked = []
    for position, part in enumerate(header.split(",")):
        tag, _, params = part.strip().partition(";")
        weight = 1.0
        if params.strip().startswith("q="):
            try:
                weight = float(params.strip()[2:])
            except ValueError:
                continue
        language = tag.split("-")[0].strip().lower()
        if language and weight > 0:
            ranked.append((-weight, position, language))
    return sorted(ranked)


def detect_locale(accept_language: Optional[str]) -> str:
    """Highest-weighted supported language of an Accept-Language header."""
    if not accept_language:
        return DEFAULT_LOCALE
    for _, _, language in _ranked_languages(accept_language):
        if language in SUPPORTED_LOCALES:
            return language
    return DEFAULT_LOCALE


def missing_messages(keys) -> Dict[str, List[str]]:
    """Keys absent from each supported locale; empty when every locale is complete."""
    gaps = {}
    for locale in SUPPORTED_LOCALES:
        absent = sorted(k for k in keys if k not in messages(locale))
        if absent:
            gaps[locale] = absent
    return gaps
