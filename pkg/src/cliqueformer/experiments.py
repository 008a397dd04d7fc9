"""Evaluation protocol and experiment drivers.

``run_benchmark`` chains data -> train -> design -> evaluate for every seed
and writes each stage's artifact under the output directory.  A stage whose
artifact already exists is loaded instead of recomputed, so an interrupted
run resumes where it stopped and runs that share a trained model (e.g. the
weight-decay ablation) reuse it.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import baselines
from .design import DesignOptConfig, ascend, optimize_designs
from .fgm import make_chain
from .model import CliqueformerConfig, count_parameters, load_checkpoint, mlp, save_checkpoint
from .numerics import make_rng, split_seeds
from .tasks import (
    CONTINUOUS,
    DEFAULT_EPS_VALID,
    Dataset,
    LatentRbfOracle,
    LatentRbfTask,
    generate_latent_rbf,
    load_tfbind8,
    normalize_score,
    percentile_filter,
)
from .training import TrainConfig, train

METHODS = ("cliqueformer", "gradasc", "rwr", "coms", "transformer")
METRICS = {"top10of1000": (10, 1000), "top1of128": (1, 128)}


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# task presets


@dataclass(frozen=True)
class TaskPreset:
    n_triangles: int | None  # None for TFBind-8
    layout: tuple[int, int, int]
    design_steps: int
    design_weight_decay: float
    train_steps: int


# Lat. RBF latents get about twice the task's intrinsic dimension (the
# latrbf11 ratio); the spare coordinates let the encoder carry nonlinear
# features of the observed tail, which a latent of exactly d_z cannot.
TASKS = {
    "latrbf11": TaskPreset(5, (10, 3, 1), 50, 0.5, 3000),
    "latrbf31": TaskPreset(15, (30, 3, 1), 50, 0.5, 3000),
    "latrbf41": TaskPreset(20, (40, 3, 1), 50, 0.5, 3000),
    "latrbf61": TaskPreset(30, (60, 3, 1), 50, 0.5, 4000),
    "tfbind8": TaskPreset(None, (4, 3, 1), 1000, 0.5, 3000),
}


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    method: str
    task: str
    seeds: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    validity: list[float] = field(default_factory=list)
    topk_std: list[float] = field(default_factory=list)

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores))

    @property
    def mean_validity(self) -> float:
        return float(np.mean(self.validity))

    @property
    def dispersion(self) -> float:
        """Standard deviation of the retained top-k scores, averaged over seeds."""
        return float(np.mean(self.topk_std))

    def summary(self) -> dict:
        return {
            "method": self.method,
            "task": self.task,
            "seeds": self.seeds,
            "scores": self.scores,
            "validity": self.validity,
            "topk_std": self.topk_std,
            "mean_score": self.mean_score,
            "mean_validity": self.mean_validity,
            "dispersion": self.dispersion,
        }


def evaluate_candidates(oracle, candidates, top_k: int) -> dict:
    """Mean of the ``top_k`` normalized oracle scores, plus the validity fraction."""
    candidates = np.asarray(candidates)
    if len(candidates) == 0:
        raise ValueError("no candidates to evaluate")
    if not 1 <= top_k <= len(candidates):
        raise ValueError(f"top_k={top_k} must lie in 1..{len(candidates)}")
    scores, valid = oracle(candidates)
    top = np.sort(scores)[::-1][:top_k]
    return {
        "score": float(top.mean()),
        "validity": float(np.mean(valid)),
        "topk_std": float(top.std()),
        "top_scores": top.tolist(),
    }


# ---------------------------------------------------------------------------
# benchmark runner


@dataclass
class RunConfig:
    task: str = "latrbf11"
    method: str = "cliqueformer"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str | None = None
    metric: str = "top10of1000"
    n_samples: int = 10_000
    task_seed: int = 0
    filter_p: float = 0.8
    eps_valid: float = DEFAULT_EPS_VALID
    tfbind_path: str | None = None
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    design: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; choose from {sorted(METRICS)}")
        if self.task == "tfbind8" and not self.tfbind_path:
            raise ValueError("the tfbind8 task needs tfbind_path")
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def preset(self) -> TaskPreset:
        return TASKS[self.task]


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def build_task(cfg: RunConfig):
    """Returns ``(task_or_None, filtered_dataset, oracle)``."""
    if cfg.task == "tfbind8":
        data, oracle = load_tfbind8(cfg.tfbind_path, cfg.filter_p)
        return None, data, oracle
    task, raw = generate_latent_rbf(
        cfg.preset.n_triangles, n_samples=cfg.n_samples, seed=cfg.task_seed, eps_valid=cfg.eps_valid
    )
    data = percentile_filter(raw, cfg.filter_p)
    return task, data, LatentRbfOracle(task, data.stats)


# Benchmark runs use a shorter schedule than the library defaults: a few
# thousand steps with an annealed, larger learning rate and no dropout, and a
# sharper decoder likelihood so decoded designs stay near the data manifold.
BENCH_MODEL = {"dropout": 0.0}
BENCH_TRAINING = {"batch_size": 128, "lr": 1e-3, "lr_schedule": "cosine", "recon_std": 0.1}


def model_config_for(cfg: RunConfig, data: Dataset) -> CliqueformerConfig:
    kwargs = {
        "layout": cfg.preset.layout,
        "input_dim": data.designs.shape[1],
        "modality": data.modality,
        "vocab_size": data.vocab_size,
        **BENCH_MODEL,
    }
    kwargs.update(cfg.model)
    return CliqueformerConfig(**kwargs)


def train_config_for(cfg: RunConfig, seed: int) -> TrainConfig:
    kwargs = {"steps": cfg.preset.train_steps, "seed": seed, **BENCH_TRAINING}
    kwargs.update(cfg.training)
    return TrainConfig(**kwargs)


def design_config_for(cfg: RunConfig, seed: int) -> DesignOptConfig:
    _, batch = METRICS[cfg.metric]
    kwargs = {
        "batch_size": batch,
        "steps": cfg.preset.design_steps,
        "weight_decay": cfg.preset.design_weight_decay,
        "seed": seed + 10_000,
    }
    kwargs.update(cfg.design)
    return DesignOptConfig(**kwargs)


def baseline_config_for(cfg: RunConfig, seed: int) -> baselines.BaselineConfig:
    _, batch = METRICS[cfg.metric]
    kwargs = {"n_candidates": batch, "seed": seed}
    kwargs.update(cfg.baseline)
    return baselines.BaselineConfig(**kwargs)


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(f"[{self.name}] {type(exc).__name__}: {exc}") from exc
        return False


def _run_method(cfg: RunConfig, data: Dataset, seed: int, seed_dir: Path) -> np.ndarray:
    if cfg.method == "cliqueformer":
        with _Stage("train"):
            mcfg = model_config_for(cfg, data)
            tcfg = train_config_for(cfg, seed)
            train_dir = seed_dir / f"train-{_key([asdict(mcfg), asdict(tcfg)])}"
            train_dir.mkdir(parents=True, exist_ok=True)
            ckpt = train_dir / "model.pt"
            if ckpt.exists():
                model, _ = load_checkpoint(ckpt)
            else:
                model, report = train(data, mcfg, tcfg)
                report.write_csv(train_dir / "curves.csv")
                save_checkpoint(ckpt, model, {"wall_clock": report.wall_clock})
        dcfg = design_config_for(cfg, seed)
        design_dir = train_dir / f"design-{_key(asdict(dcfg))}"
    else:
        bcfg = baseline_config_for(cfg, seed)
        extra = asdict(model_config_for(cfg, data)) if cfg.method == "transformer" else None
        design_dir = seed_dir / f"{cfg.method}-{_key([asdict(bcfg), extra, cfg.training.get('steps')])}"
    design_dir.mkdir(parents=True, exist_ok=True)
    out = design_dir / "candidates.npz"
    with _Stage("design"):
        if out.exists():
            with np.load(out) as f:
                return f["designs"]
        if cfg.method == "cliqueformer":
            batch = optimize_designs(model, data, dcfg)
            np.savez(out, designs=batch.designs, latents=batch.latents.double().numpy(), trace=np.array(batch.trace))
            return batch.designs
        if cfg.method == "gradasc":
            designs = baselines.grad_ascent_baseline(data, bcfg)
        elif cfg.method == "coms":
            designs = baselines.coms_baseline(data, bcfg)
        elif cfg.method == "rwr":
            designs = baselines.rwr_baseline(data, bcfg)
        else:
            designs = baselines.transformer_baseline(
                data, bcfg, model_config_for(cfg, data), cfg.training.get("steps", cfg.preset.train_steps)
            )
        np.savez(out, designs=designs)
        return designs


def run_benchmark(cfg: RunConfig) -> EvalResult:
    """Full pipeline for every seed; aggregates top-k scores and validity."""
    out_root = Path(cfg.out) if cfg.out else Path(tempfile.mkdtemp(prefix="cliqueformer-"))
    out_root.mkdir(parents=True, exist_ok=True)
    with _Stage("data"):
        task, data, oracle = build_task(cfg)
        data_key = _key([cfg.task, cfg.n_samples, cfg.task_seed, cfg.filter_p, cfg.eps_valid, cfg.tfbind_path])
        data_dir = out_root / f"data-{data_key}"
        data_dir.mkdir(exist_ok=True)
        if task is not None and not (data_dir / "task.npz").exists():
            task.save(data_dir / "task.npz")
        if not (data_dir / "dataset.npz").exists():
            data.save(data_dir / "dataset.npz")
    top_k, _ = METRICS[cfg.metric]
    result = EvalResult(cfg.method, cfg.task)
    rows = []
    for seed in cfg.seeds:
        seed_dir = data_dir / f"seed-{seed}"
        designs = _run_method(cfg, data, seed, seed_dir)
        with _Stage("evaluate"):
            row = evaluate_candidates(oracle, designs, top_k)
        result.seeds.append(seed)
        result.scores.append(row["score"])
        result.validity.append(row["validity"])
        result.topk_std.append(row["topk_std"])
        rows.append({"task": cfg.task, "method": cfg.method, "seed": seed, **{k: row[k] for k in ("score", "validity", "topk_std")}})
    if cfg.out:
        with open(out_root / f"results-{cfg.method}-{cfg.task}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        (out_root / f"results-{cfg.method}-{cfg.task}.json").write_text(json.dumps(result.summary(), indent=2))
    return result


# ---------------------------------------------------------------------------
# ablations

ABLATION_VARIANTS = ("base", "no_vib", "no_weight_decay")


def fixed_dz_layouts(d_z: int, d_knot: int = 1) -> list[tuple[int, int, int]]:
    """All chains with latent size ``d_z`` and knot ``d_knot`` (``d_clique > d_knot``)."""
    span = d_z - d_knot
    return [(n, span // n + d_knot, d_knot) for n in range(1, span + 1) if span % n == 0]


def fixed_dclique_layouts(d_clique: int, counts, d_knot: int = 1) -> list[tuple[int, int, int]]:
    return [(int(n), d_clique, d_knot) for n in counts]


def ablation_variant(cfg: RunConfig, variant: str) -> RunConfig:
    if variant == "base":
        return cfg
    if variant == "no_vib":
        return replace(cfg, training={**cfg.training, "vib_weight": 0.0})
    if variant == "no_weight_decay":
        return replace(cfg, design={**cfg.design, "weight_decay": 0.0})
    if variant.startswith("layout:"):
        layout = tuple(int(v) for v in variant.split(":", 1)[1].split(","))
        make_chain(*layout)
        return replace(cfg, model={**cfg.model, "layout": layout})
    raise ValueError(f"unknown ablation variant {variant!r}")


def expand_variants(variants, d_z: int | None = None) -> list[str]:
    out = []
    for v in variants:
        if v == "nclique_fixed_dz":
            out += [f"layout:{n},{c},{k}" for n, c, k in fixed_dz_layouts(d_z)]
        elif v == "nclique_fixed_dclique":
            out += [f"layout:{n},{c},{k}" for n, c, k in fixed_dclique_layouts(3, (2, 5, 10, 15))]
        else:
            out.append(v)
    return out


def ablation_suite(cfg: RunConfig, variants=ABLATION_VARIANTS) -> list[dict]:
    """One row per variant with mean score, validity and dispersion."""
    if cfg.method != "cliqueformer":
        raise ValueError("ablations apply to the cliqueformer method")
    table = []
    for variant in expand_variants(variants, make_chain(*cfg.preset.layout).d_z):
        res = run_benchmark(ablation_variant(cfg, variant))
        table.append({"variant": variant, **res.summary()})
    return table


# ---------------------------------------------------------------------------
# structure is a property of the parameterization


def rotation_matrix(l: int) -> np.ndarray:
    """Orthonormal ``l x l`` matrix whose first row is ``1/sqrt(l)``."""
    basis = np.eye(l)
    basis[:, 0] = 1.0
    q, _ = np.linalg.qr(basis)
    if q[0, 0] < 0:
        q[:, 0] *= -1
    return q.T


def _mixed_partials(f, x: np.ndarray) -> np.ndarray:
    """Hessian of a scalar torch function, in float64 via autograd."""
    point = torch.as_tensor(x, dtype=torch.float64)
    return torch.autograd.functional.hessian(f, point).numpy()


def rotation_demo(l: int, n_probes: int = 100, seed: int = 0) -> dict:
    """Mixed partials of one function in two standard-normal parameterizations.

    ``f_z(z) = exp(sum(z) / sqrt(l))`` couples every pair of coordinates;
    after rotating so the first axis is the all-ones direction the same
    function reads ``f_v(v) = exp(v_1)`` and couples none.
    """
    if l < 2:
        raise ValueError("l must be at least 2")
    R = torch.as_tensor(rotation_matrix(l))

    def f_z(z):
        return torch.exp(z.sum() / math.sqrt(l))

    def f_v(v):
        return f_z(R.T @ v)

    rng = make_rng(seed)
    off = ~np.eye(l, dtype=bool)
    max_v, min_z, max_grad_tail = 0.0, math.inf, 0.0
    for _ in range(n_probes):
        z = rng.standard_normal(l)
        v = (R @ torch.as_tensor(z)).numpy()
        max_v = max(max_v, np.abs(_mixed_partials(f_v, v)[off]).max())
        min_z = min(min_z, np.abs(_mixed_partials(f_z, z)[off]).min())
        grad = torch.autograd.functional.jacobian(f_v, torch.as_tensor(v))
        max_grad_tail = max(max_grad_tail, grad[1:].abs().max().item())
    return {
        "l": l,
        "max_offdiag_v": float(max_v),
        "min_offdiag_z": float(min_z),
        "max_grad_v_tail": float(max_grad_tail),
        "dependence_gap": float(min_z / max(max_v, 1e-300)),
    }


# ---------------------------------------------------------------------------
# known FGM versus an oblivious model


class CliqueMlp(torch.nn.Module):
    """Shared MLP over the cliques of a known layout with clique tags; outputs are averaged."""

    def __init__(self, layout, hidden: int = 256, d_model: int = 64):
        super().__init__()
        from .model import clique_embedding

        self.layout = layout
        e = layout.d_clique + layout.d_clique % 2
        self.net = mlp([layout.d_clique + e, hidden, hidden, 1], "gelu", 0.0)
        ids = torch.arange(1, layout.n_clique + 1)
        self.register_buffer("index", torch.as_tensor(layout.index_matrix()))
        self.register_buffer("tags", clique_embedding(ids, e, d_model))
        self.register_buffer("y_shift", torch.zeros((), dtype=torch.float64))
        self.register_buffer("y_scale", torch.ones((), dtype=torch.float64))

    def forward(self, x):
        xc = x[..., self.index]
        tags = self.tags.to(x.dtype).expand(*xc.shape[:-1], -1)
        return self.net(torch.cat([xc, tags], -1)).squeeze(-1).mean(-1)


class FlatMlp(torch.nn.Module):
    def __init__(self, input_dim: int, hidden: int):
        super().__init__()
        self.net = mlp([input_dim, hidden, hidden, 1], "gelu", 0.0)
        self.register_buffer("y_shift", torch.zeros((), dtype=torch.float64))
        self.register_buffer("y_scale", torch.ones((), dtype=torch.float64))

    def forward(self, x):
        return self.net(x).squeeze(-1)


def matched_flat_hidden(input_dim: int, target: int) -> int:
    """Hidden width ``h`` of a 2-hidden-layer MLP with about ``target`` parameters."""
    # h^2 + (input_dim + 3) h + 1 = target
    b = input_dim + 3
    return max(1, round((-b + math.sqrt(b * b + 4 * (target - 1))) / 2))


@dataclass
class FgmStudyConfig:
    n_triangles: int = 10
    n_samples: int = 5000
    n_test: int = 2000
    hidden: int = 256
    train_steps: int = 1500
    batch_size: int = 128
    lr: float = 1e-3
    n_designs: int = 256
    design_steps: int = 100
    design_lr: float = 0.02


def fgm_vs_oblivious(seed: int = 0, cfg: FgmStudyConfig | None = None, linear: bool = False) -> dict:
    """Fit a clique-decomposed and a parameter-matched monolithic MLP, then ascend both.

    Data are standard normal latents scored by a chain-of-triangles RBF
    mixture (no observation transform), or by a random linear function when
    ``linear`` is set.  Design values are ground-truth values normalized by
    the training-data range.
    """
    cfg = cfg or FgmStudyConfig()
    task_seed, init_seed, fit_seed, design_seed = split_seeds(seed, 4)
    task, _ = generate_latent_rbf(cfg.n_triangles, n_samples=1, seed=task_seed)
    rng = make_rng(task_seed)
    if linear:
        coef = rng.standard_normal(task.d_z)
        value = lambda z: np.asarray(z) @ coef  # noqa: E731
    else:
        value = task.value
    z_train = rng.standard_normal((cfg.n_samples, task.d_z))
    z_test = rng.standard_normal((cfg.n_test, task.d_z))
    y_train, y_test = value(z_train), value(z_test)
    x = torch.as_tensor(z_train)
    y = torch.as_tensor(y_train)

    torch.manual_seed(init_seed)
    fgm_model = CliqueMlp(task.layout, cfg.hidden).double()
    n_fgm = count_parameters(fgm_model)
    obl_model = FlatMlp(task.d_z, matched_flat_hidden(task.d_z, n_fgm)).double()
    n_obl = count_parameters(obl_model)
    if abs(n_obl - n_fgm) > 0.05 * n_fgm:
        raise ValueError(f"could not match parameter counts ({n_fgm} vs {n_obl})")

    fit_cfg = baselines.BaselineConfig(train_steps=cfg.train_steps, batch_size=cfg.batch_size, lr=cfg.lr)
    stats = (float(y_train.min()), float(y_train.max()))
    x0 = torch.as_tensor(z_train[make_rng(design_seed).integers(0, cfg.n_samples, cfg.n_designs)])
    report = {"params_fgm": n_fgm, "params_obl": n_obl, "test_var": float(y_test.var())}
    for name, model in (("fgm", fgm_model), ("obl", obl_model)):
        baselines.fit_regressor(model, x, y, fit_cfg, fit_seed)
        for p in model.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            pred = model(torch.as_tensor(z_test)) * model.y_scale + model.y_shift
        report[f"test_mse_{name}"] = float(((pred.numpy() - y_test) ** 2).mean())
        designs = ascend(x0, model, DesignOptConfig(steps=cfg.design_steps, lr=cfg.design_lr, weight_decay=0.0))
        report[f"design_value_{name}"] = float(normalize_score(stats, value(designs.numpy())).mean())
    report["start_value"] = float(normalize_score(stats, value(x0.numpy())).mean())
    return report
