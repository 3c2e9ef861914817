"""
Word tokenizer shared by templates, corpora and the parser
"""

import re
from typing import List

_TRAILING_PUNCT = re.compile(r"^(.*?)([.,!?;:]+)$")


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace and separate trailing punctuation

    Idempotent on already tokenized text joined by single spaces.

    Args:
        text: Raw sentence

    Returns:
        Token list
    """
    tokens: List[str] = []
    for word in text.lower().split():
        match = _TRAILING_PUNCT.match(word)
        if match and match.group(1):
            tokens.append(match.group(1))
            tokens.extend(match.group(2))
        elif match:
            # word made only of punctuation
            tokens.extend(match.group(2))
        else:
            tokens.append(word)
    return tokens


def detokenize(tokens: List[str]) -> str:
    return " ".join(tokens)
