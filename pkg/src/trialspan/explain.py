"""Masking-based Shapley attribution over criteria sentences and words.

The unit of play is either a real (unmasked) criteria sentence or a word
within one chosen sentence. A coalition's value is the model's predicted
duration with everything outside the coalition masked out: sentences are
masked exactly like padding (zero row, mask false), words by re-embedding
the sentence from the kept words only. Exact enumeration is available up
to 12 items; beyond that the permutation-sampling estimator applies.
"""

from __future__ import annotations

import html
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding import S_MAX, EmbeddedTrial, build_features
from .encoder import ModelParams, forward
from .errors import DataFormatError, UsageError
from .ingest import TrialRecord

ATTRIBUTION_FORMAT = "tdattr-v1"

EXACT_LIMIT = 12  # 2^n forward passes


@dataclass
class Attribution:
    """Per-item Shapley values for one trial, in years of predicted duration.

    ``base_value`` is the fully masked prediction, ``full_value`` the
    unmasked one; the values sum to their difference (exactly under
    enumeration, within sampling error otherwise, with per-item standard
    errors reported).
    """

    nct_id: str
    unit: str  # "sentence" | "word"
    items: list[tuple[str, float]]  # natural order
    base_value: float
    full_value: float
    stderrs: Optional[list[float]] = None
    n_perms: Optional[int] = None

    @property
    def values(self) -> np.ndarray:
        return np.asarray([v for _, v in self.items], dtype=np.float64)

    @property
    def efficiency_gap(self) -> float:
        return float(self.values.sum() - (self.full_value - self.base_value))


def mask_subset(trial: EmbeddedTrial, keep, unit: str = "sentence", *,
                provider=None, sentence_slot: Optional[int] = None,
                words: Optional[list[str]] = None) -> EmbeddedTrial:
    """A copy of the trial with everything outside ``keep`` masked out.

    Sentence unit: ``keep`` holds indices into the real sentences (slot
    order); dropped sentences become padding. Word unit: ``keep`` holds
    indices into ``words`` of the sentence at ``sentence_slot``, whose row
    is re-embedded from the kept words joined in their original order.
    """
    keep = set(keep)
    if unit == "sentence":
        slots = np.flatnonzero(trial.sentence_mask)
        bad = [i for i in keep if not 0 <= i < slots.size]
        if bad:
            raise ValueError(f"sentence item index out of range: {bad[0]}")
        mat = trial.sentence_mat.copy()
        mask = trial.sentence_mask.copy()
        for item, slot in enumerate(slots):
            if item not in keep:
                mat[slot] = 0.0
                mask[slot] = False
        return replace(trial, sentence_mat=mat, sentence_mask=mask)
    if unit == "word":
        if provider is None or sentence_slot is None or words is None:
            raise ValueError("word unit needs provider, sentence_slot, and words")
        if not trial.sentence_mask[sentence_slot]:
            raise ValueError(f"slot {sentence_slot} holds no real sentence")
        bad = [i for i in keep if not 0 <= i < len(words)]
        if bad:
            raise ValueError(f"word item index out of range: {bad[0]}")
        kept_text = " ".join(words[i] for i in range(len(words)) if i in keep)
        mat = trial.sentence_mat.copy()
        mat[sentence_slot] = provider.embed(kept_text)
        return replace(trial, sentence_mat=mat)
    raise ValueError(f"unknown attribution unit {unit!r}")


class MaskingGame:
    """Coalition value function f(S) = model prediction under masking.

    Values are memoized by coalition bitmask, so repeated subsets across
    permutations cost one forward pass each.
    """

    def __init__(self, params: ModelParams, trial: EmbeddedTrial, unit: str,
                 item_texts: list[str], provider=None,
                 sentence_slot: Optional[int] = None):
        self.params = params
        self.trial = trial
        self.unit = unit
        self.item_texts = list(item_texts)
        self.provider = provider
        self.sentence_slot = sentence_slot
        self._cache: dict[int, float] = {}
        if unit == "word" and (provider is None or sentence_slot is None):
            raise ValueError("word unit needs a provider and a sentence slot")

    @property
    def n(self) -> int:
        return len(self.item_texts)

    @property
    def nct_id(self) -> str:
        return self.trial.nct_id

    def value(self, bitmask: int) -> float:
        if bitmask in self._cache:
            return self._cache[bitmask]
        keep = {i for i in range(self.n) if bitmask >> i & 1}
        masked = mask_subset(self.trial, keep, self.unit, provider=self.provider,
                             sentence_slot=self.sentence_slot, words=self.item_texts)
        result = forward(self.params, masked)
        self._cache[bitmask] = result
        return result

    @property
    def full_value(self) -> float:
        return self.value((1 << self.n) - 1)

    @property
    def base_value(self) -> float:
        return self.value(0)


def sentence_game(params: ModelParams, trial: EmbeddedTrial,
                  sentence_texts: Optional[list[str]] = None) -> MaskingGame:
    """Game over the trial's real sentences; texts default to slot labels."""
    n = int(trial.sentence_mask.sum())
    if sentence_texts is None:
        sentence_texts = [f"sentence {i}" for i in range(n)]
    if len(sentence_texts) != n:
        raise ValueError(f"{len(sentence_texts)} texts for {n} real sentences")
    return MaskingGame(params, trial, "sentence", sentence_texts)


def game_from_record(params: ModelParams, provider, record: TrialRecord,
                     unit: str = "sentence",
                     sentence_index: Optional[int] = None) -> MaskingGame:
    """Build the game straight from a parsed record (embeds it first).

    For the word unit, ``sentence_index`` picks a sentence by its position
    in the real-sentence list (inclusion block first, then exclusion).
    """
    trial = build_features(provider, record)
    texts = list(record.inclusion[:S_MAX]) + list(record.exclusion[:S_MAX])
    if unit == "sentence":
        return MaskingGame(params, trial, "sentence", texts)
    if unit == "word":
        if sentence_index is None or not 0 <= sentence_index < len(texts):
            raise UsageError(f"word unit needs a sentence index in 0..{len(texts) - 1}")
        slots = np.flatnonzero(trial.sentence_mask)
        return MaskingGame(params, trial, "word", texts[sentence_index].split(),
                           provider=provider, sentence_slot=int(slots[sentence_index]))
    raise UsageError(f"unknown attribution unit {unit!r}")


def shapley_exact(game: MaskingGame) -> Attribution:
    """Exact Shapley values by subset enumeration (up to 12 items).

    phi_i = sum over coalitions S without i of
    |S|! (n-|S|-1)! / n! * (f(S + i) - f(S)).
    """
    n = game.n
    if n == 0:
        raise ValueError("the game has no items to attribute")
    if n > EXACT_LIMIT:
        raise UsageError(
            f"exact enumeration needs 2^{n} forward passes; use shapley_sampled")
    fact = [math.factorial(k) for k in range(n + 1)]
    phi = np.zeros(n)
    for bitmask in range(1 << n):
        s = bitmask.bit_count()
        weight = fact[s] * fact[n - s - 1] / fact[n]
        f_s = game.value(bitmask)
        for i in range(n):
            if not bitmask >> i & 1:
                phi[i] += weight * (game.value(bitmask | 1 << i) - f_s)
    return Attribution(
        nct_id=game.nct_id,
        unit=game.unit,
        items=list(zip(game.item_texts, phi.tolist())),
        base_value=game.base_value,
        full_value=game.full_value,
    )


def shapley_sampled(game: MaskingGame, n_perms: int = 2000, seed: int = 0) -> Attribution:
    """Monte-Carlo permutation estimate with per-item standard errors.

    Each random ordering contributes one marginal value per item; the
    telescoping sum keeps the efficiency identity exact for every sample.
    """
    if n_perms < 1:
        raise ValueError("n_perms must be >= 1")
    n = game.n
    if n == 0:
        raise ValueError("the game has no items to attribute")
    rng = np.random.default_rng(seed)
    contribs = np.zeros((n_perms, n))
    for p in range(n_perms):
        prev = game.value(0)
        bitmask = 0
        for i in rng.permutation(n):
            bitmask |= 1 << int(i)
            current = game.value(bitmask)
            contribs[p, i] = current - prev
            prev = current
    phi = contribs.mean(axis=0)
    if n_perms > 1:
        stderr = contribs.std(axis=0, ddof=1) / math.sqrt(n_perms)
    else:
        stderr = np.zeros(n)
    return Attribution(
        nct_id=game.nct_id,
        unit=game.unit,
        items=list(zip(game.item_texts, phi.tolist())),
        base_value=game.base_value,
        full_value=game.full_value,
        stderrs=stderr.tolist(),
        n_perms=n_perms,
    )


# --- serialization and rendering ---------------------------------------------


def attribution_to_dict(attr: Attribution) -> dict:
    return {
        "format": ATTRIBUTION_FORMAT,
        "nct_id": attr.nct_id,
        "unit": attr.unit,
        "base_value": attr.base_value,
        "full_value": attr.full_value,
        "items": [
            {"text": text, "value": value,
             "stderr": None if attr.stderrs is None else attr.stderrs[i]}
            for i, (text, value) in enumerate(attr.items)
        ],
        "n_perms": attr.n_perms,
    }


def attribution_from_dict(doc: dict) -> Attribution:
    if doc.get("format") != ATTRIBUTION_FORMAT:
        raise DataFormatError(f"unknown attribution format {doc.get('format')!r}")
    stderrs = [item["stderr"] for item in doc["items"]]
    return Attribution(
        nct_id=doc["nct_id"],
        unit=doc["unit"],
        items=[(item["text"], float(item["value"])) for item in doc["items"]],
        base_value=float(doc["base_value"]),
        full_value=float(doc["full_value"]),
        stderrs=None if any(s is None for s in stderrs) else [float(s) for s in stderrs],
        n_perms=doc.get("n_perms"),
    )


def save_attribution(attr: Attribution, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(attribution_to_dict(attr), fh, indent=2)
        fh.write("\n")


def load_attribution(path: str | Path) -> Attribution:
    with open(path, encoding="utf-8") as fh:
        return attribution_from_dict(json.load(fh))


def render_attribution(attr: Attribution, base_path: str | Path,
                       word_attrs: Optional[dict[int, Attribution]] = None):
    """Write <base>.txt (value-sorted table) and <base>.html (highlight view).

    HTML background intensity is |value| / max|value| within each
    attribution, with hue by sign; every item also prints its numeric
    value. ``word_attrs`` optionally nests word-level attributions inside
    sentence items, keyed by sentence item index.
    """
    base = Path(base_path)
    txt_path = base.with_suffix(".txt")
    html_path = base.with_suffix(".html")

    lines = [
        f"attribution for {attr.nct_id} ({attr.unit} level)",
        f"base value: {attr.base_value:.4f} years",
        f"full value: {attr.full_value:.4f} years",
        f"sum of contributions: {attr.values.sum():+.4f} years",
        "",
    ]
    for text, value in sorted(attr.items, key=lambda kv: kv[1], reverse=True):
        lines.append(f"{value:+10.4f}  {text}")
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    html_path.write_text(_render_html(attr, word_attrs), encoding="utf-8")
    return txt_path, html_path


_HTML_PAGE = """<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>attribution {nct_id}</title>
<style>
body {{ font-family: sans-serif; max-width: 60em; margin: 2em auto; line-height: 1.9; }}
.item {{ padding: 0.1em 0.25em; border-radius: 0.2em; }}
.badge {{ font-weight: bold; margin-right: 0.5em; border: 1px solid #999; }}
.sentence {{ margin: 0.4em 0; }}
small {{ color: #555; }}
</style>
</head>
<body>
<h3>attribution for {nct_id} ({unit} level)</h3>
<p>base value {base:.4f} years, full value {full:.4f} years</p>
{body}
</body>
</html>
"""


def _item_span(text: str, value: float, max_abs: float, extra_class: str = "") -> str:
    intensity = abs(value) / max_abs if max_abs > 0 else 0.0
    color = "198,40,40" if value >= 0 else "21,101,192"
    return (
        f'<span class="item {"pos" if value >= 0 else "neg"}{extra_class}" '
        f'data-value="{value:.6f}" data-intensity="{intensity:.6f}" '
        f'style="background: rgba({color},{intensity:.3f})" '
        f'title="{value:+.4f} years">{html.escape(text)} '
        f"<small>({value:+.3f})</small></span>"
    )


def _render_html(attr: Attribution, word_attrs) -> str:
    max_abs = float(np.max(np.abs(attr.values))) if attr.items else 0.0
    blocks = []
    for i, (text, value) in enumerate(attr.items):
        nested = word_attrs.get(i) if word_attrs else None
        if nested is None:
            blocks.append(f'<div class="sentence">{_item_span(text, value, max_abs)}</div>')
            continue
        badge = _item_span(f"{value:+.2f}", value, max_abs, extra_class=" badge")
        word_max = float(np.max(np.abs(nested.values))) if nested.items else 0.0
        words = " ".join(_item_span(w, v, word_max) for w, v in nested.items)
        blocks.append(f'<div class="sentence">{badge}{words}</div>')
    return _HTML_PAGE.format(nct_id=html.escape(attr.nct_id), unit=attr.unit,
                             base=attr.base_value, full=attr.full_value,
                             body="\n".join(blocks))
