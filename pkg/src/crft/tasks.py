"""Synthetic chain-of-thought modular arithmetic.

A prompt is a chain of signed single-digit operands, optionally followed by
irrelevant filler words before the ``=``::

    <bos> 3 +5 -2 +7 w3 w0 w5 ... =

and the target opens with a convention tag, restates the first operand,
then spells every running result (mod ``modulus``), ending with ``<eos>``::

    <plain> 3 8 6 3 <eos>

so the last digit before ``<eos>`` is the final answer.  Each signed operand
is one token, which keeps the distance between a result and the operand it
consumes constant.  Few-shot variants prepend solved examples as a
demonstration segment.

With ``inv_from=k``, questions whose first operand is ``>= k`` are solved
under an inverted-sign convention (every ``+v`` applied as ``-v`` and vice
versa) and tagged ``<inv>``; ``rule_noise`` flips that choice for a random
share of samples, so the running results must follow the tag rather than
the first operand.  A model pretrained that way commits to a convention at
the ``=`` position; evaluated on plain-only data it is right for the plain
share of prompts, and fine-tuning has to steer it toward the plain rule.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

N_DIGITS = 10
PLUS0 = N_DIGITS
MINUS0 = 2 * N_DIGITS
EQ, BOS, EOS, PAD, PLAIN, INV = range(3 * N_DIGITS, 3 * N_DIGITS + 6)
FILLER0 = 3 * N_DIGITS + 6
N_FILLER_WORDS = 8
VOCAB_SIZE = FILLER0 + N_FILLER_WORDS

SCHEMA = "crft-task/1"
SPLITS = ("train", "val", "test")

_SYMBOLS = {EQ: "=", BOS: "<bos>", EOS: "<eos>", PAD: "<pad>", PLAIN: "<plain>", INV: "<inv>"}


def symbol(tok: int) -> str:
    if 0 <= tok < N_DIGITS:
        return str(tok)
    if PLUS0 <= tok < MINUS0:
        return f"+{tok - PLUS0}"
    if MINUS0 <= tok < EQ:
        return f"-{tok - MINUS0}"
    if FILLER0 <= tok < VOCAB_SIZE:
        return f"w{tok - FILLER0}"
    return _SYMBOLS[tok]


def render(tokens: Iterable[int]) -> str:
    return " ".join(symbol(t) for t in tokens)


@dataclass
class SegmentMap:
    """Per-position tags over prompt + target."""

    tags: list[str]

    def span(self, tag: str) -> tuple[int, int] | None:
        idx = [i for i, t in enumerate(self.tags) if t == tag]
        return (idx[0], idx[-1] + 1) if idx else None

    def bounds(self) -> dict[str, list[int]]:
        return {t: list(s) for t in ("demonstration", "question", "answer") if (s := self.span(t))}

    @classmethod
    def from_bounds(cls, bounds: dict[str, Sequence[int]], length: int) -> "SegmentMap":
        tags = [""] * length
        for tag, (start, end) in bounds.items():
            for i in range(start, end):
                tags[i] = tag
        if "" in tags:
            raise ValueError("segment bounds do not cover the sequence")
        return cls(tags)

    def group_ids(self, grouping: bool) -> list[int]:
        """0 for demonstration, 1 for question/answer under grouping; else all 0."""
        if not grouping:
            return [0] * len(self.tags)
        return [0 if t == "demonstration" else 1 for t in self.tags]


@dataclass
class TaskSample:
    prompt: list[int]
    target: list[int]
    segments: SegmentMap
    answer: int
    meta: dict = field(default_factory=dict)

    @property
    def tokens(self) -> list[int]:
        return self.prompt + self.target

    def to_record(self) -> dict:
        return {
            "schema": SCHEMA,
            "prompt": self.prompt,
            "target": self.target,
            "segments": self.segments.bounds(),
            "answer": self.answer,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskSample":
        if rec.get("schema") != SCHEMA:
            raise ValueError(f"unsupported dataset schema {rec.get('schema')!r}")
        prompt, target = list(rec["prompt"]), list(rec["target"])
        segs = SegmentMap.from_bounds(rec["segments"], len(prompt) + len(target))
        return cls(prompt, target, segs, int(rec["answer"]))


def _split_of(prompt: Sequence[int]) -> str:
    h = int(hashlib.sha256(bytes(prompt)).hexdigest()[:8], 16) % 10
    return "train" if h < 8 else ("val" if h == 8 else "test")


def _problem(rng: random.Random, n_steps: int, modulus: int, n_filler: int,
             inv_from: int | None = None, rule_noise: float = 0.0):
    operands = [rng.randrange(modulus) for _ in range(n_steps)]
    flipped = inv_from is not None and operands[0] >= inv_from
    if rule_noise > 0 and rng.random() < rule_noise:
        flipped = not flipped
    signs = [rng.choice((1, -1)) for _ in range(n_steps - 1)]
    body = [operands[0]]
    acc = operands[0]
    steps = [acc]
    for sign, v in zip(signs, operands[1:]):
        body.append((PLUS0 if sign > 0 else MINUS0) + v)
        acc = (acc + (-sign if flipped else sign) * v) % modulus
        steps.append(acc)
    body += [FILLER0 + rng.randrange(N_FILLER_WORDS) for _ in range(n_filler)]
    body.append(EQ)
    return body, [INV if flipped else PLAIN] + steps + [EOS], acc, flipped


def evaluate_prompt(prompt: Sequence[int], modulus: int = N_DIGITS, flipped: bool = False) -> list[int]:
    """Re-derive the target digits of the last question in ``prompt``."""
    if not prompt or prompt[-1] != EQ:
        raise ValueError("prompt does not end with '='")
    end = len(prompt) - 1
    while end > 0 and FILLER0 <= prompt[end - 1] < VOCAB_SIZE:
        end -= 1
    i = end - 1
    while i >= 0 and PLUS0 <= prompt[i] < EQ:
        i -= 1
    if i < 0 or not 0 <= prompt[i] < N_DIGITS:
        raise ValueError("expression must start with an unsigned digit")
    acc = prompt[i]
    out = [acc]
    for tok in prompt[i + 1:end]:
        v = (tok - PLUS0) if tok < MINUS0 else -(tok - MINUS0)
        if flipped:
            v = -v
        acc = (acc + v) % modulus
        out.append(acc)
    return out


def gen_chain_arith(
    count: int,
    n_steps: int = 4,
    modulus: int = N_DIGITS,
    seed: int = 0,
    split: str = "train",
    n_filler: int = 0,
    shots: int = 0,
    inv_from: int | None = None,
    rule_noise: float = 0.0,
) -> list[TaskSample]:
    """``count`` samples for ``split``; splits are disjoint by a prompt hash.

    ``n_steps`` counts operands, so each target holds ``n_steps`` digits
    (the restated first operand and ``n_steps - 1`` running results).
    Demonstrations carry no filler and follow the same convention rule as
    questions.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    if not 2 <= modulus <= N_DIGITS:
        raise ValueError(f"modulus must lie in [2, {N_DIGITS}]")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if n_filler < 0 or shots < 0:
        raise ValueError("n_filler and shots must be >= 0")
    if inv_from is not None and not 0 <= inv_from <= modulus:
        raise ValueError(f"inv_from must lie in [0, {modulus}]")
    if not 0.0 <= rule_noise <= 1.0:
        raise ValueError("rule_noise must lie in [0, 1]")
    rng = random.Random(f"chain-arith:{seed}")
    out: list[TaskSample] = []
    seen = set()
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 50 * count + 1000:
            raise ValueError("could not draw enough distinct samples for this configuration")
        demo: list[int] = []
        for _ in range(shots):
            body, target, _, _ = _problem(rng, n_steps, modulus, 0, inv_from, rule_noise)
            demo += body + target
        body, target, answer, flipped = _problem(rng, n_steps, modulus, n_filler, inv_from, rule_noise)
        prompt = [BOS] + demo + body
        key = tuple(prompt)
        if key in seen or _split_of(prompt) != split:
            continue
        seen.add(key)
        tags = ["demonstration"] * (1 + len(demo)) + ["question"] * len(body) + ["answer"] * len(target)
        if not demo:
            tags[0] = "question"
        out.append(TaskSample(prompt, target, SegmentMap(tags), answer,
                              {"n_steps": n_steps, "modulus": modulus, "shots": shots, "n_filler": n_filler,
                               "flipped": flipped}))
    return out


def extract_answer(generated: Sequence[int]) -> int | None:
    """Digit immediately before the first ``<eos>``; ``None`` if malformed."""
    if EOS not in generated:
        return None
    cut = list(generated[: list(generated).index(EOS)])
    if not cut or not 0 <= cut[-1] < N_DIGITS:
        return None
    return cut[-1]


def save_dataset(samples: Sequence[TaskSample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[TaskSample]:
    with open(path) as fh:
        return [TaskSample.from_record(json.loads(line)) for line in fh if line.strip()]
