"""Seeded synthetic multi-task sequence data.

Token layout: 0 is padding, ``1 + task_id`` marks the task in position 0,
and symbol ``v`` is token ``SYMBOL_BASE + v``. Targets line up with inputs
position by position; padded target positions carry no loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PAD = 0
TASK_BASE = 1
SYMBOL_BASE = 16
RULES = ("copy", "reverse", "modular-add", "parity")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """One task of the mixture.

    ``param`` is the modulus for modular-add and the number of bits for
    parity; copy and reverse ignore it.
    """

    task_id: int
    rule: str
    param: int = 0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown task rule {self.rule!r}; expected one of {RULES}")

    @property
    def name(self):
        return f"{self.rule}({self.param})" if self.rule in ("modular-add", "parity") else self.rule


@dataclass
class Split:
    inputs: np.ndarray
    targets: np.ndarray
    task_ids: np.ndarray

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx):
        return Split(self.inputs[idx], self.targets[idx], self.task_ids[idx])


@dataclass
class Dataset:
    tasks: tuple
    train: Split
    val: Split
    seq_len: int
    n_symbols: int

    def min_vocab(self):
        return SYMBOL_BASE + self.n_symbols


def default_tasks():
    return (
        SyntheticTaskSpec(0, "copy"),
        SyntheticTaskSpec(1, "reverse"),
        SyntheticTaskSpec(2, "modular-add", 7),
        SyntheticTaskSpec(3, "parity", 3),
    )


def _sample(spec, rng, seq_len, n_symbols):
    body = seq_len - 1
    inp = np.full(seq_len, PAD, dtype=np.int64)
    tgt = np.full(seq_len, PAD, dtype=np.int64)
    inp[0] = TASK_BASE + spec.task_id
    if spec.rule in ("copy", "reverse"):
        content = rng.integers(0, n_symbols, body)
        inp[1:] = SYMBOL_BASE + content
        tgt[:body] = SYMBOL_BASE + (content if spec.rule == "copy" else content[::-1])
    elif spec.rule == "modular-add":
        a, b = rng.integers(0, spec.param, 2)
        inp[1], inp[2] = SYMBOL_BASE + a, SYMBOL_BASE + b
        tgt[-1] = SYMBOL_BASE + (a + b) % spec.param
    else:
        bits = rng.integers(0, 2, spec.param)
        inp[1 : 1 + spec.param] = SYMBOL_BASE + bits
        tgt[-1] = SYMBOL_BASE + int(bits.sum() % 2)
    return inp, tgt


def _validate(spec, seq_len, n_symbols):
    if spec.rule == "modular-add" and not 2 <= spec.param <= n_symbols:
        raise ConfigError(f"modular-add modulus must lie in [2, {n_symbols}], got {spec.param}")
    if spec.rule == "modular-add" and seq_len < 3:
        raise ConfigError("modular-add needs seq_len >= 3")
    if spec.rule == "parity" and not 1 <= spec.param <= seq_len - 1:
        raise ConfigError(f"parity bit count must lie in [1, {seq_len - 1}], got {spec.param}")
    if spec.task_id + TASK_BASE >= SYMBOL_BASE:
        raise ConfigError(f"task id {spec.task_id} collides with symbol tokens")


def validate_tasks(tasks, seq_len, n_symbols):
    tasks = tuple(tasks)
    if not tasks:
        raise ConfigError("need at least one task")
    if sorted(t.task_id for t in tasks) != list(range(len(tasks))):
        raise ConfigError("task ids must be 0..T-1 with no gaps")
    for spec in tasks:
        _validate(spec, seq_len, n_symbols)
    return tasks


def generate_dataset(tasks, n_per_task, seed, seq_len=4, n_symbols=8):
    """Exactly ``n_per_task`` samples per task, split 90/10 within each task."""
    if n_per_task < 1:
        raise ConfigError(f"n_per_task must be >= 1, got {n_per_task}")
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2, got {seq_len}")
    tasks = validate_tasks(tasks, seq_len, n_symbols)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for spec in tasks:
        pairs = [_sample(spec, rng, seq_len, n_symbols) for _ in range(n_per_task)]
        order = rng.permutation(n_per_task)
        n_val = n_per_task // 10
        for pos, i in enumerate(order):
            (val if pos < n_val else train).append((pairs[i][0], pairs[i][1], spec.task_id))
    return Dataset(tasks, _stack(train, seq_len), _stack(val, seq_len), seq_len, n_symbols)


def _stack(rows, seq_len):
    if not rows:
        empty = np.zeros((0, seq_len), dtype=np.int64)
        return Split(empty, empty.copy(), np.zeros(0, dtype=np.int64))
    inputs, targets, ids = zip(*rows)
    return Split(np.stack(inputs), np.stack(targets), np.asarray(ids, dtype=np.int64))
