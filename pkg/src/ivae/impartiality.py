"""Impartiality blocks: split-and-merge junctions with a rewritten backward.

A block has one or more shared *inputs* (each a tensor or a group of
tensors, e.g. all parameters of one decoder) consumed by several *heads*.
Models declare blocks once in a :class:`BlockRegistry`; on every forward
pass they open a :class:`BlockPass` with :meth:`BlockRegistry.mark` and

* route each head's view of an input through :meth:`BlockPass.branch`,
* wrap each head output with :meth:`BlockPass.head_output`.

On backward, the head output gradient is multiplied by the head's beta (so
head-internal parameters see ``beta * grad``), the per-head gradients reaching
each input are collected into a ``(heads, coordinates)`` stack, passed through
that input's resolver, and the row-sum is propagated into the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gradconflict import Resolver, ResolverError, make_resolver

GOALS = ("li", "eei", "dei")


def parse_blocks(text: str | Sequence[str] | None) -> tuple[str, ...]:
    """``"li,eei"`` -> ``("li", "eei")``; empty string disables every block."""
    if text is None:
        return GOALS
    items = text.split(",") if isinstance(text, str) else list(text)
    goals = tuple(dict.fromkeys(s.strip().lower() for s in items if s.strip()))
    bad = [g for g in goals if g not in GOALS]
    if bad:
        raise ValueError(f"unknown block goal(s) {bad}; expected a subset of {GOALS}")
    return goals


@dataclass
class ImpartialityBlock:
    block_id: str
    goal: str
    inputs: tuple[str, ...]
    heads: tuple[str, ...]
    betas: dict[str, float]
    resolvers: dict[str, Resolver] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if self.goal not in GOALS:
            raise ValueError(f"unknown goal {self.goal!r}")
        for h, b in self.betas.items():
            if not b > 0:
                raise ValueError(f"block {self.block_id}: beta for head {h!r} must be positive, got {b}")
        missing = set(self.inputs) - set(self.resolvers)
        if missing:
            raise ValueError(f"block {self.block_id}: inputs without resolver binding: {sorted(missing)}")

    def describe(self) -> dict:
        return {
            "block_id": self.block_id,
            "goal": self.goal,
            "inputs": list(self.inputs),
            "heads": list(self.heads),
            "betas": [self.betas[h] for h in self.heads],
            "resolvers": {m: self.resolvers[m].label() for m in self.inputs},
        }


class BlockRegistry:
    """Declared blocks of one model.

    Parameters
    ----------
    fpsi : str
        Resolver chain applied at every block input, e.g. ``"mgda_ub+pcgrad"``.
    blocks : str or sequence
        Enabled goals, a subset of ``li, eei, dei``.  Disabled blocks are
        still declared (for the inventory) but behave as plain graph edges.
    beta : ``"dim"``, ``"one"`` or mapping
        ``"dim"`` gives LI heads ``1 / dim`` and every other head 1.
    seed : int
        Seeds the per-input resolver generators.
    """

    def __init__(self, fpsi: str = "identity", blocks="li,eei,dei", beta="dim", seed: int = 0):
        self.fpsi = fpsi or "identity"
        self.enabled = parse_blocks(blocks)
        if isinstance(beta, str) and beta not in ("dim", "one"):
            raise ValueError("beta must be 'dim', 'one' or a mapping of head -> beta")
        self.beta = beta
        self.seed = seed
        self.blocks: dict[str, ImpartialityBlock] = {}

    def declare(self, block_id: str, goal: str, inputs: Sequence[str], heads: Sequence[str],
                dims: dict[str, int] | None = None) -> ImpartialityBlock:
        if block_id in self.blocks:
            raise ValueError(f"block id {block_id!r} declared twice")
        inputs, heads = tuple(inputs), tuple(heads)
        betas = {h: self._beta(goal, h, dims) for h in heads}
        resolvers = {}
        for j, m in enumerate(inputs):
            seq = np.random.SeedSequence([self.seed, len(self.blocks), j])
            resolvers[m] = make_resolver(self.fpsi, seed=seq)
        block = ImpartialityBlock(block_id, goal, inputs, heads, betas, resolvers)
        self.blocks[block_id] = block
        return block

    def _beta(self, goal, head, dims) -> float:
        if isinstance(self.beta, str):
            if self.beta == "dim" and goal == "li" and dims and head in dims:
                return 1.0 / dims[head]
            return 1.0
        return float(self.beta.get(head, 1.0))

    def is_enabled(self, block_id: str) -> bool:
        return self.blocks[block_id].goal in self.enabled

    def mark(self, block_id: str) -> "BlockPass":
        block = self.blocks[block_id]
        tape = ad.current_tape()
        if block.goal not in self.enabled or tape is None:
            return _NULL_PASS
        return BlockPass(block, tape)

    def inventory(self) -> list[dict]:
        out = []
        for b in self.blocks.values():
            row = b.describe()
            row["enabled"] = b.goal in self.enabled
            out.append(row)
        return out

    def counts(self, enabled_only: bool = False) -> dict[str, int]:
        c = {g: 0 for g in GOALS}
        for b in self.blocks.values():
            if not enabled_only or b.goal in self.enabled:
                c[b.goal] += 1
        return c

    def __len__(self) -> int:
        return len(self.blocks)


def _as_list(x) -> tuple[list[Tensor], str]:
    if isinstance(x, Tensor):
        return [x], "tensor"
    if isinstance(x, dict):
        return list(x.values()), "dict"
    return list(x), "list"


class BlockPass:
    """One forward pass through a block on the active tape."""

    def __init__(self, block: ImpartialityBlock, tape: ad.Tape):
        self.block = block
        self.tape = tape
        self._targets: dict[str, list[Tensor]] = {}
        self._sinks: dict[str, dict[str, list[np.ndarray | None]]] = {}

    def branch(self, input_label: str, head: str, x):
        """Head ``head``'s private view of shared input ``input_label``.

        ``x`` is a tensor, a list of tensors or a name -> tensor dict; the
        result has the same structure with every tensor replaced by a junction.
        """
        block = self.block
        if input_label not in block.inputs:
            raise ValueError(f"block {block.block_id}: unknown input {input_label!r}")
        if head not in block.heads:
            raise ValueError(f"block {block.block_id}: unknown head {head!r}")
        tensors, kind = _as_list(x)
        if not any(t.requires_grad for t in tensors):
            return x
        targets = self._targets.get(input_label)
        if targets is None:
            self._targets[input_label] = tensors
            self._sinks[input_label] = {}
            self.tape.register_flush(tensors, lambda grads, m=input_label: self._flush(m, grads))
        elif len(targets) != len(tensors) or any(a is not b for a, b in zip(targets, tensors)):
            raise ValueError(f"block {block.block_id}: input {input_label!r} bound to different tensors "
                             "across heads")
        sinks = self._sinks[input_label]
        if head in sinks:
            raise ValueError(f"block {block.block_id}: head {head!r} consumes input {input_label!r} twice; "
                             "the split-and-merge pattern is violated")
        slots: list[np.ndarray | None] = [None] * len(tensors)
        sinks[head] = slots

        def make_sink(i):
            def sink(g):
                slots[i] = g if slots[i] is None else slots[i] + g
            return sink

        views = [ad.junction(t, make_sink(i)) if t.requires_grad else t for i, t in enumerate(tensors)]
        if kind == "tensor":
            return views[0]
        if kind == "dict":
            return dict(zip(x.keys(), views))
        return views

    def head_output(self, head: str, out):
        beta = self.block.betas[head]
        if beta == 1.0:
            return out
        return ad.scale_grad(out, beta)

    def _flush(self, input_label: str, grads: dict) -> None:
        tensors = self._targets[input_label]
        sinks = self._sinks[input_label]
        heads = [h for h in self.block.heads if h in sinks]
        resolver = self.block.resolvers[input_label]
        sizes = [t.data.size for t in tensors]
        if resolver.is_identity:
            total = [None] * len(tensors)
            for h in heads:
                for i, g in enumerate(sinks[h]):
                    if g is not None:
                        total[i] = g if total[i] is None else total[i] + g
            parts = total
        else:
            stack = np.zeros((len(heads), sum(sizes)))
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            for r, h in enumerate(heads):
                for i, g in enumerate(sinks[h]):
                    if g is not None:
                        stack[r, offsets[i]:offsets[i + 1]] = np.broadcast_to(g, tensors[i].shape).ravel()
            try:
                resolved = resolver(stack)
            except ResolverError as exc:
                raise ResolverError(f"block {self.block.block_id}, input {input_label!r}: {exc}") from exc
            flat = resolved.sum(axis=0)
            parts = [flat[offsets[i]:offsets[i + 1]].reshape(t.shape) for i, t in enumerate(tensors)]
        for t, g in zip(tensors, parts):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g


class _NullPass:
    """Stand-in for a disabled block: every call is a pass-through."""

    def branch(self, input_label, head, x):
        return x

    def head_output(self, head, out):
        return out


_NULL_PASS = _NullPass()
