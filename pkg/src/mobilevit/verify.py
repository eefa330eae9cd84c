"""Structural checks: receptive-field probes, named property suites, patch-size study."""

from __future__ import annotations

import json
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .blocks import MobileViTBlock, MobileViTBlockSpec, MV2Block, MV2Spec, PatchGrid, fold, unfold
from .model import REPORTED_PARAMS, ModelConfig, attention_cost, build, count_params, load_weights, save_weights
from .nn import (BatchNorm2d, Conv2d, ConvSpec, LayerNorm, Linear, MultiHeadAttention, AttentionSpec,
                 TransformerLayer)
from .rng import Rng
from .sampler import DEFAULT_RESOLUTIONS, ResolutionSet, batch_size_at, count_updates, plan_epoch
from .tensor import Tensor, backward, enable_grad, grad_check, matmul, softmax, swish
from .train import Schedule, lr_at

SUPPORT_THRESHOLD = 1e-12
GRAD_TOL = 1e-2


@dataclass
class FieldProbeReport:
    coordinate: tuple
    mask: np.ndarray = field(repr=False)
    config: dict

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())

    def to_dict(self) -> dict:
        return {"coordinate": list(self.coordinate), "coverage": self.coverage,
                "support": int(self.mask.sum()), "cells": int(self.mask.size), "config": self.config}


def receptive_field_probe(factory: Callable[[Rng], object], input_size, coordinate, channels: int,
                          trials: int = 3, seed: int = 0, tap: str = "output", config: dict | None = None
                          ) -> FieldProbeReport:
    """Input support of one output location, unioned over ``trials`` random inits.

    ``factory(rng)`` builds the module under test. The probed scalar is the
    sum over channels at ``coordinate``. ``tap="global"`` probes a MobileViT
    block's folded transformer output instead of its fused output.
    """
    hgt, wid = input_size
    y0, x0 = coordinate
    mask = np.zeros((hgt, wid), dtype=bool)
    for t in range(trials):
        rng = Rng(seed).split("probe", t)
        mod = factory(rng.split("weights"))
        mod.eval()
        x = Tensor(rng.split("input").normal((1, channels, hgt, wid)), requires_grad=True)
        with enable_grad():
            out = mod.global_features(x) if tap == "global" else mod(x)
            if not (0 <= y0 < out.shape[2] and 0 <= x0 < out.shape[3]):
                raise IndexError(f"coordinate {coordinate} outside output {out.shape[2:]}")
            grads = backward(out[0, :, y0, x0].sum())
        g = grads.get(x.id)
        if g is not None:
            mask |= (np.abs(g[0]) > SUPPORT_THRESHOLD).any(axis=0)
    cfg = dict(config or {})
    cfg.update(tap=tap, trials=trials, input=[hgt, wid])
    return FieldProbeReport(tuple(coordinate), mask, cfg)


def mobilevit_probe(size: int, patch: int, kernel: int = 3, channels: int = 4, dim: int = 8,
                    coordinate=None, tap: str = "output", trials: int = 3, seed: int = 0) -> FieldProbeReport:
    spec = MobileViTBlockSpec(channels, dim, 1, kernel, (patch, patch), heads=2)
    coordinate = coordinate if coordinate is not None else (size // 2, size // 2)
    return receptive_field_probe(lambda r: MobileViTBlock(spec, r), (size, size), coordinate, channels,
                                 trials, seed, tap, {"block": "mobilevit", "patch": patch, "kernel": kernel})


def conv_probe(size: int, kernel: int = 3, channels: int = 2, coordinate=None, seed: int = 0) -> FieldProbeReport:
    spec = ConvSpec(channels, channels, kernel)
    coordinate = coordinate if coordinate is not None else (size // 2, size // 2)
    return receptive_field_probe(lambda r: Conv2d(spec, r), (size, size), coordinate, channels, 3, seed,
                                 config={"block": "conv", "kernel": kernel})


# -- suites ---------------------------------------------------------------------------


@dataclass
class SuiteReport:
    name: str
    cases: list = field(default_factory=list)
    seconds: float = 0.0

    def check(self, case: str, ok: bool, detail="") -> bool:
        self.cases.append({"case": case, "passed": bool(ok), "detail": str(detail)})
        return ok

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.cases)

    def to_dict(self) -> dict:
        return {"suite": self.name, "passed": self.passed, "seconds": round(self.seconds, 3), "cases": self.cases}

    def to_text(self) -> str:
        n_ok = sum(c["passed"] for c in self.cases)
        lines = [f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {n_ok}/{len(self.cases)} cases"]
        for c in self.cases:
            if not c["passed"]:
                lines.append(f"    FAIL {c['case']}: {c['detail']}")
        return "\n".join(lines)


def l2_norm(a: np.ndarray) -> float:
    """Norm summed in sorted order, so any permutation of ``a`` gives the identical float."""
    v = np.sort(a.astype(np.float64).ravel())
    return float(np.sqrt(np.sum(v * v)))


def random_grid_case(rng: Rng) -> tuple:
    h, w = (int(v) for v in rng.gen.choice([1, 2, 4], 2))
    b = int(rng.integers(1, 3))
    d = int(rng.integers(1, 6))
    H, W = h * int(rng.integers(1, 5)), w * int(rng.integers(1, 5))
    return (b, d, H, W), PatchGrid(h, w, H, W)


def _suite_roundtrip(rep: SuiteReport, cases: int, seed: int):
    root = Rng(seed).split("roundtrip")
    exact = 0
    for i in range(cases):
        rng = root.split(i)
        shape, grid = random_grid_case(rng)
        x = Tensor(rng.normal(shape))
        u = unfold(x, grid)
        back = fold(u, grid).data
        u2 = unfold(fold(u, grid), grid).data
        same_norm = l2_norm(u.data) == l2_norm(x.data)
        ok = np.array_equal(back, x.data) and np.array_equal(u2, u.data) and same_norm
        exact += ok
        if not ok:
            rep.check(f"grid {shape} h={grid.h} w={grid.w}", False, "round trip not exact")
    rep.check(f"fold/unfold exact on {cases} random cases", exact == cases, f"{exact}/{cases}")
    state = build("XXS", seed).state_dict()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "w.mvtw"
        save_weights(path, state)
        loaded = load_weights(path)
    same = list(loaded) == list(state) and all(
        loaded[k].tobytes() == np.asarray(v).tobytes() and loaded[k].shape == v.shape for k, v in state.items())
    rep.check("weights file round trip bit-exact", same)


def gradcheck_cases(seed: int = 0) -> dict:
    """name -> list of zero-arg callables, each returning a relative error."""
    root = Rng(seed).split("gradcheck")
    weights = {}

    def projected(out: Tensor, rng: Rng) -> Tensor:
        # fixed random weights per (stream, shape) so every evaluation sees the same loss
        key = (rng.path, out.shape)
        if key not in weights:
            weights[key] = Tensor(rng.normal(out.shape))
        return (out * weights[key]).sum()

    def module_case(make_mod, in_shape, train_mode=False, zero_grad=("k.bias",)):
        """``zero_grad``: parameter-name suffixes whose gradient is identically zero
        (relative error is undefined there); those are asserted ~0 instead."""
        def run(i):
            rng = root.split(make_mod.__name__, i)
            mod = make_mod(rng.split("w"))
            mod.train(train_mode)
            x = Tensor(rng.split("x").normal(in_shape))
            proj = rng.split("proj")
            errs = [grad_check(lambda t: projected(mod(t), proj), x, seed=i)]
            named = list(mod.named_parameters())
            checked = [t for n, t in named if not n.endswith(zero_grad)]
            p = checked[int(rng.integers(len(checked)))]
            errs.append(grad_check(lambda _t: projected(mod(x), proj), p, seed=i))
            structural = [t for n, t in named if n.endswith(zero_grad)]
            if structural:
                with enable_grad():
                    grads = backward(projected(mod(x), proj))
                for t in structural:
                    g = grads.get(t.id)
                    if g is not None and np.abs(g).max() > 1e-5:
                        errs.append(float("inf"))
            return max(errs)
        return run

    def fn_case(fn, shape):
        def run(i):
            rng = root.split(fn.__name__, i)
            x = Tensor(rng.normal(shape))
            proj = rng.split("proj")
            return grad_check(lambda t: projected(fn(t), proj), x, seed=i)
        return run

    def conv3(r):
        return Conv2d(ConvSpec(3, 4, 3, bias=True), r)

    def conv_s2(r):
        return Conv2d(ConvSpec(3, 4, 3, stride=2), r)

    def depthwise(r):
        return Conv2d(ConvSpec(4, 4, 3, groups=4), r)

    def batchnorm(r):
        return BatchNorm2d(3)

    def layernorm(r):
        return LayerNorm(8)

    def linear(r):
        return Linear(8, 5, r)

    def attention(r):
        return MultiHeadAttention(AttentionSpec(16, 2), r)

    def transformer(r):
        return TransformerLayer(16, 2, r)

    def mv2(r):
        return MV2Block(MV2Spec(4, 4, 1, 2), r)

    def mv2_down(r):
        return MV2Block(MV2Spec(4, 6, 2, 2), r)

    def mobilevit(r):
        return MobileViTBlock(MobileViTBlockSpec(4, 8, 1, 3, (2, 2), heads=2), r)

    def mobilevit_resize(r):
        return MobileViTBlock(MobileViTBlockSpec(4, 8, 1, 3, (3, 3), heads=2), r)

    def matmul_sq(t):
        return matmul(t, t)

    def softmax_last(t):
        return softmax(t, -1)

    return {
        "swish": fn_case(swish, (3, 7)),
        "matmul": fn_case(matmul_sq, (3, 3)),
        "softmax": fn_case(softmax_last, (4, 6)),
        "conv2d": module_case(conv3, (2, 3, 6, 6)),
        "conv2d_stride2": module_case(conv_s2, (2, 3, 7, 7)),
        "conv2d_depthwise": module_case(depthwise, (2, 4, 6, 6)),
        "batchnorm_train": module_case(batchnorm, (4, 3, 3, 3), train_mode=True),
        "batchnorm_eval": module_case(batchnorm, (2, 3, 3, 3)),
        "layernorm": module_case(layernorm, (3, 4, 8)),
        "linear": module_case(linear, (3, 4, 8)),
        "attention": module_case(attention, (2, 4, 16)),
        "transformer_layer": module_case(transformer, (2, 4, 16)),
        "mv2_block": module_case(mv2, (2, 4, 4, 4), train_mode=True),
        "mv2_block_stride2": module_case(mv2_down, (2, 4, 6, 6), train_mode=True),
        # train-mode BN after proj_out cancels any per-channel constant, i.e. the closing LN bias
        "mobilevit_block": module_case(mobilevit, (2, 4, 4, 4), train_mode=True,
                                       zero_grad=("k.bias", "norm.bias")),
        "mobilevit_block_resize": module_case(mobilevit_resize, (2, 4, 4, 4)),
    }


def _suite_gradcheck(rep: SuiteReport, cases: int, seed: int):
    for name, run in gradcheck_cases(seed).items():
        errs = [run(i) for i in range(cases)]
        worst = max(errs)
        rep.check(f"{name}: {cases} cases < {GRAD_TOL}", worst < GRAD_TOL, f"worst rel. error {worst:.2e}")


def _suite_params(rep: SuiteReport, cases: int, seed: int):
    counts = {}
    for variant, reported in REPORTED_PARAMS.items():
        n = count_params(build(variant, seed))
        counts[variant] = n
        rel = n / reported - 1
        rep.check(f"{variant} params within 3% of {reported / 1e6:.1f} M", abs(rel) <= 0.03, f"{n} ({rel:+.2%})")
    rep.check("XXS < XS < S", counts["XXS"] < counts["XS"] < counts["S"], counts)


def _suite_sampler(rep: SuiteReport, cases: int, seed: int):
    rset = ResolutionSet(DEFAULT_RESOLUTIONS, 1024)
    sizes = [batch_size_at(rset, r) for r in rset.resolutions]
    rep.check("b_t for default set", sizes == [4096, 2844, 1600, 1264, 1024], sizes)
    std = count_updates(None, 1_281_167, 300, 1024)
    rep.check("standard updates = 375,600", std == 375_600, std)
    ms = count_updates(rset, 1_281_167, 300, seed=seed)
    rep.check("multi-scale updates < standard", ms < std, ms)
    ok = True
    for i in range(cases):
        n = int(Rng(seed).split("n", i).integers(1, 5000))
        plan = plan_epoch(ResolutionSet(((64, 64), (96, 96), (128, 128)), 32), n, seed + i)
        ok &= bool(np.array_equal(np.sort(np.concatenate([plan.batch_indices(b) for b in plan])), np.arange(n)))
    rep.check(f"plans partition the dataset ({cases} cases)", ok)


def _suite_schedule(rep: SuiteReport, cases: int, seed: int):
    s = Schedule(total=375_600)
    rep.check("lr(0) = 0.0002", abs(lr_at(s, 0) - 2e-4) <= 1e-9, lr_at(s, 0))
    rep.check("lr(3000) = 0.002", abs(lr_at(s, 3000) - 2e-3) <= 1e-9, lr_at(s, 3000))
    rep.check("lr(T) = 0.0002", abs(lr_at(s, s.total) - 2e-4) <= 1e-9, lr_at(s, s.total))
    left, right = lr_at(s, 3000 - 1e-6), lr_at(s, 3000 + 1e-6)
    rep.check("continuous at warmup", abs(left - right) <= 1e-9 and abs(left - 2e-3) <= 1e-9, (left, right))


def _suite_field(rep: SuiteReport, cases: int, seed: int):
    for size in (8, 16):
        for tap in ("output", "global"):
            r = mobilevit_probe(size, 2, tap=tap, seed=seed)
            rep.check(f"h=w=2, n=3, {size}x{size}, {tap}: full coverage", r.coverage == 1.0, r.coverage)
    r = mobilevit_probe(8, 4, tap="global", seed=seed)
    rep.check("h=w=4, n=3, 8x8, global: coverage < 1", r.coverage < 1.0, r.coverage)
    r = mobilevit_probe(8, 4, coordinate=(0, 0), seed=seed)
    rep.check("h=w=4, n=3, 8x8, output at corner: coverage < 1", r.coverage < 1.0, r.coverage)
    r = conv_probe(8, seed=seed)
    rep.check("3x3 conv control = 9/64", r.coverage == 9 / 64, r.coverage)


SUITES = {
    "roundtrip": (_suite_roundtrip, 50),
    "gradcheck": (_suite_gradcheck, 20),
    "params": (_suite_params, 0),
    "sampler": (_suite_sampler, 20),
    "schedule": (_suite_schedule, 0),
    "field": (_suite_field, 0),
}


def run_suite(name: str, cases: int | None = None, seed: int = 0) -> SuiteReport:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    fn, default_cases = SUITES[name]
    rep = SuiteReport(name)
    t0 = time.perf_counter()
    fn(rep, default_cases if cases is None else cases, seed)
    rep.seconds = time.perf_counter() - t0
    return rep


# -- patch-size study -----------------------------------------------------------------

STUDY_SETTINGS = ((2, 2, 2), (3, 3, 3), (4, 4, 4), (8, 4, 2))


def patch_size_study(config: ModelConfig, input_size: int = 256, settings=STUDY_SETTINGS,
                     probe_channels: int = 4, probe_dim: int = 8, seed: int = 0) -> list:
    """Per patch setting: coverage at each MobileViT stage, attention MACs, params.

    Coverage probes a reduced-width block (same kernel and patch) at the
    stage's feature size, at the global-representation tap.
    """
    rows = []
    for setting in settings:
        cfg = config.with_patch(setting)
        cost = attention_cost(cfg, input_size, input_size)
        coverage = []
        for blk in cost["blocks"]:
            size = blk["feature"][0]
            rep = mobilevit_probe(size, blk["patch"], cfg.kernel, probe_channels, probe_dim,
                                  tap="global", trials=2, seed=seed)
            coverage.append(rep.coverage)
        rows.append({
            "patch": list(setting),
            "coverage": coverage,
            "resized": [b["resized"] != b["feature"] for b in cost["blocks"]],
            "attention_macs": cost["attention_total"],
            "params": count_params(build(cfg, seed)),
        })
    return rows


def format_study(rows: list) -> str:
    lines = [f"{'patch':>8}  {'coverage (s8/s16/s32)':>24}  {'attention MACs':>15}  {'params':>9}"]
    for r in rows:
        cov = "/".join(f"{c:.3f}" for c in r["coverage"])
        lines.append(f"{','.join(map(str, r['patch'])):>8}  {cov:>24}  {r['attention_macs']:>15,}  {r['params']:>9,}")
    return "\n".join(lines)


def reports_json(reports: list) -> str:
    return json.dumps({"passed": all(r.passed for r in reports), "suites": [r.to_dict() for r in reports]},
                      indent=2, default=str)
