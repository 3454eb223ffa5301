"""Prompt templates shipped as package data.

Templates use ``{placeholder}`` markers substituted by plain replacement,
not str.format, so braces inside schema text or SQL never break rendering.
"""

from __future__ import annotations

from importlib import resources


def load(name: str) -> str:
    return resources.files(__package__).joinpath(name).read_text(encoding="utf-8")


def fill(template: str, **values: str) -> str:
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out
