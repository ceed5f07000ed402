"""Command-line entry point: configuration, suites and reproducible reports.

Every subcommand reads one key-value config file (INI syntax), draws all
randomness from a single seeded generator and writes a JSON summary plus CSV
tables to ``--out``.  Reports embed the resolved config and its hash, and
contain no timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import scipy

from . import __version__

SUITES = ("flows", "free_flow", "minimizers", "summation_by_parts", "resolvent_identity", "cluster", "renorm")


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.replace(",", " ").split())


@dataclass(frozen=True)
class ExperimentConfig:
    # geometry
    L: int = 2
    m: int = 0
    nlevels: int = 2
    mvol: int = 1
    d: int = 1
    # action and couplings
    a: float = 1.3
    mu_bar: float = 0.4
    lam: float = 0.01
    # run control
    seed: int = 0
    tol: float = 1e-9
    samples: int = 20
    suites: tuple[str, ...] = SUITES
    max_sites: int = 4096
    # decay scans
    decay_m: tuple[int, ...] = (2, 3)
    decay_mvol: int = 4
    # cluster demo
    cluster_grid: tuple[int, ...] = (3, 2)
    cluster_hole: tuple[int, ...] = (1, 0)
    cluster_h0: float = 0.05
    cluster_kappa: float = 1.0
    cluster_n_cap: int = 12
    # polymer tables
    polymer_grid: tuple[int, ...] = (4, 4)
    polymer_cap: int = 8
    polymer_anchor: int = 5
    polymer_kappas: tuple[float, ...] = (1.0, 2.0, 4.0, 6.0, 8.0)
    # field regions and flow
    layer_factor: int = 5
    small_max_cubes: int = 2
    flow_steps: int = 10

    SECTIONS = {
        "geometry": ("L", "m", "nlevels", "mvol", "d"),
        "params": ("a", "mu_bar", "lam"),
        "run": ("seed", "tol", "samples", "suites", "max_sites"),
        "decay": ("decay_m", "decay_mvol"),
        "cluster": ("cluster_grid", "cluster_hole", "cluster_h0", "cluster_kappa", "cluster_n_cap"),
        "polymers": ("polymer_grid", "polymer_cap", "polymer_anchor", "polymer_kappas"),
        "regions": ("layer_factor", "small_max_cubes", "flow_steps"),
    }

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: dict[str, Any] | None = None) -> "ExperimentConfig":
        values: dict[str, Any] = {}
        if path is not None:
            parser = configparser.ConfigParser()
            parser.optionxform = str
            try:
                read = parser.read(path)
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            if not read:
                raise ConfigError(f"cannot read config file {path}")
            known = {f.name: f for f in fields(cls)}
            for section in parser.sections():
                if section not in cls.SECTIONS:
                    raise ConfigError(f"unknown section [{section}]")
                for key, raw in parser.items(section):
                    if key not in cls.SECTIONS[section]:
                        raise ConfigError(f"unknown key {key!r} in [{section}]")
                    values[key] = cls._convert(known[key].type, raw, key)
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @staticmethod
    def _convert(kind: Any, raw: str, key: str) -> Any:
        kind = str(kind)
        try:
            if "tuple[int" in kind:
                return _ints(raw)
            if "tuple[float" in kind:
                return _floats(raw)
            if "tuple[str" in kind:
                return _words(raw)
            if kind == "int":
                return int(raw)
            if kind == "float":
                return float(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return raw

    @property
    def n(self) -> int:
        return self.L ** (self.mvol + self.nlevels)

    def validate(self) -> None:
        checks = [
            (self.L >= 2, "L must be at least 2"),
            (1 <= self.d <= 3, "d must be 1, 2 or 3"),
            (self.m >= 0 and self.mvol >= 0, "exponents must be non-negative"),
            (self.nlevels >= 1, "nlevels must be at least 1"),
            (self.a > 0, "a must be positive"),
            (self.mu_bar >= 0, "mu_bar must be non-negative"),
            (0 < self.lam < 1, "lam must lie in (0, 1)"),
            (self.tol >= 0 and math.isfinite(self.tol), "tol must be a finite non-negative number"),
            (self.samples >= 1, "samples must be positive"),
            (set(self.suites) <= set(SUITES), f"suites must be drawn from {', '.join(SUITES)}"),
            (self.L ** (self.mvol + self.nlevels - self.m - 1) >= 2, "geometry leaves fewer than two cubes for Omega_1"),
            (len(self.cluster_grid) == len(self.cluster_hole), "cluster hole must match the grid dimension"),
            (all(0 <= h < g for h, g in zip(self.cluster_hole, self.cluster_grid)), "cluster hole outside the grid"),
            (int(np.prod(self.cluster_grid)) <= 6, "cluster grid is capped at 6 cubes"),
            (0 <= self.cluster_h0 <= 0.05, "cluster_h0 must lie in [0, 0.05]"),
            (int(np.prod(self.polymer_grid)) <= 36, "polymer grid is capped at 36 cubes"),
            (0 <= self.polymer_anchor < int(np.prod(self.polymer_grid)), "polymer anchor outside the grid"),
            (1 <= self.polymer_cap <= 8, "polymer cap must lie in 1..8"),
            (self.layer_factor >= 1 and self.small_max_cubes >= 1, "layer constants must be positive"),
            (self.flow_steps >= 1, "flow_steps must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.n**self.d > self.max_sites:
            raise ConfigError(f"infeasible size: {self.n**self.d} sites exceeds max_sites={self.max_sites}")

    def resolved(self) -> dict[str, Any]:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def content_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# geometry builders


def drop_last_masks(geometry, depth: int) -> list[np.ndarray]:
    """``Ω_j``: every cube at scale ``m + j`` except the last slab along axis 0 (nested by construction)."""
    masks = []
    for j in range(1, depth + 1):
        side = geometry.n // geometry.L ** geometry.cube_exponent(j)
        mask = np.ones((side,) * geometry.d, dtype=bool)
        mask[side - 1] = False
        masks.append(mask)
    return masks


def margin_masks(geometry, depth: int) -> list[np.ndarray]:
    """``Ω_1`` drops the last slab; deeper regions keep cells ``1..side-3`` along axis 0."""
    masks = []
    for j in range(1, depth + 1):
        side = geometry.n // geometry.L ** geometry.cube_exponent(j)
        mask = np.zeros((side,) * geometry.d, dtype=bool)
        if j == 1:
            mask[: side - 1] = True
        else:
            mask[1 : side - 2] = True
        masks.append(mask)
    return masks


def flow_sequence(cfg: ExperimentConfig):
    from .geometry import LatticeGeometry, RegionSequence

    g = LatticeGeometry(cfg.L, cfg.m, cfg.nlevels, cfg.mvol, d=cfg.d, k=cfg.nlevels)
    return RegionSequence.standard(g, drop_last_masks(g, cfg.nlevels))


def step_instance(cfg: ExperimentConfig, k: int = 2):
    """A one-step geometry with room for ``Ω_{k+1}`` and ``Λ`` away from ``Ω_1^c``.

    The volume exponent is raised to the smallest value that leaves four
    cubes at scale ``m + k + 1``.
    """
    from .geometry import LatticeGeometry, Region, RegionSequence
    from .greens import StepGeometry

    mvol = cfg.mvol
    g = LatticeGeometry(cfg.L, cfg.m, cfg.nlevels, mvol, d=cfg.d, k=k)
    while g.n // g.L ** g.cube_exponent(k + 1) < 4:
        mvol += 1
        g = LatticeGeometry(cfg.L, cfg.m, cfg.nlevels, mvol, d=cfg.d, k=k)
    if g.n_sites > cfg.max_sites:
        raise ConfigError(f"infeasible size: one-step instance needs {g.n_sites} sites")
    masks = margin_masks(g, k + 1)
    seq = RegionSequence.standard(g, masks[:k])
    onext = Region.from_mask(g, g.cube_exponent(k + 1), masks[k])
    lam = Region.from_mask(g, g.cube_exponent(k), masks[k - 1])
    return StepGeometry(seq, onext), lam


# ---------------------------------------------------------------------------
# suites


def _params(cfg: ExperimentConfig, d: int | None = None):
    from .quadforms import ActionParams

    return ActionParams(cfg.a, cfg.L, cfg.d if d is None else d, mu_bar=cfg.mu_bar)


def suite_flows(cfg, rng) -> dict[str, float]:
    from .flows import compare_flows

    seq = flow_sequence(cfg)
    return {"sequential_vs_multiscale": compare_flows(seq, _params(cfg), rng, cfg.samples).max_residual}


def suite_free_flow(cfg, rng) -> dict[str, float]:
    from .flows import compare_free_flow

    seq = flow_sequence(cfg)
    return {"free_flow_closed_form": compare_free_flow(seq, _params(cfg), rng, cfg.samples).max_residual}


def suite_minimizers(cfg, rng) -> dict[str, float]:
    from .greens import verify_expansion_identities

    step, lam = step_instance(cfg)
    p = _params(cfg)
    g = step.geometry
    worst: dict[str, float] = {}
    for _ in range(cfg.samples):
        Phi = rng.normal(size=step.layout.size)
        Pn = rng.normal(size=len(step.next_sites))
        ext = rng.normal(size=g.n_sites)
        Z = rng.normal(size=len(step.inner_sites))
        for name, val in verify_expansion_identities(step, p, lam, Phi, Pn, ext, Z).items():
            worst[name] = max(worst.get(name, 0.0), float(val))
    return worst


def suite_summation_by_parts(cfg, rng) -> dict[str, float]:
    from .geometry import LatticeGeometry
    from .quadforms import summation_by_parts

    g = LatticeGeometry(cfg.L, cfg.m, cfg.nlevels, cfg.mvol, d=cfg.d, k=cfg.nlevels)
    worst = 0.0
    n_sites = g.n_sites
    for _ in range(cfg.samples):
        f = rng.normal(size=n_sites)
        h = rng.normal(size=n_sites)
        mask = (rng.random(g.shape) < 0.5)
        scale = max(1.0, abs(float(np.dot(f, h))))
        worst = max(worst, abs(summation_by_parts(g, f, h, mask)) / scale)
    return {"summation_by_parts": worst}


def suite_resolvent_identity(cfg, rng) -> dict[str, float]:
    from .fluctuation import FluctuationProblem

    step, _ = step_instance(cfg, k=1)
    prob = FluctuationProblem(step, _params(cfg))
    return {"resolvent_identity": max(prob.resolvent_identity_residual(r) for r in (0.0, 0.1, 1.0, 10.0, 100.0, 1e4))}


def _cluster_system(cfg, rng):
    from .cluster import SiteMeasure, synthetic_activity
    from .polymers import CubeComplex

    cx = CubeComplex.grid(tuple(cfg.cluster_grid))
    omega = cx.full_mask & ~cx.mask_of([tuple(cfg.cluster_hole)])
    system = synthetic_activity(cx, omega, omega, cfg.cluster_h0, cfg.cluster_kappa, rng)
    return system, SiteMeasure.fair_pm1(), np.zeros(cx.n_cubes)


def suite_cluster(cfg, rng) -> dict[str, float]:
    from .cluster import full_pipeline

    system, measure, ext = _cluster_system(cfg, rng)
    rep = full_pipeline(system, measure, ext, n_cap=cfg.cluster_n_cap)
    return {"xi_relative_gap": float(rep.relative_gap if rep.relative_gap is not None else math.inf)}


def suite_renorm(cfg, rng) -> dict[str, float]:
    from .renormflow import SiteLattice, decompose_over_region, lambda_chain, run_flow, synthetic_functional

    side = max(cfg.L**cfg.m, 1)
    n = cfg.L ** (cfg.mvol + cfg.nlevels)
    if n // side < 4:
        side = max(1, n // 4)
    lat = SiteLattice((n,) * min(cfg.d, 2), side)
    worst = {"renorm_decomposition": 0.0, "nu_symmetric": 0.0}
    for sym in (False, True):
        F = synthetic_functional(lat, rng, symmetric=sym, small_max_cubes=cfg.small_max_cubes)
        cubes = lat.cubes()
        region = [c for c in cubes if c[0] < max(1, lat.cube_grid[0] // 2)]
        phi = rng.normal(size=lat.n_sites)
        dec = decompose_over_region(F, region, phi)
        worst["renorm_decomposition"] = max(worst["renorm_decomposition"], dec.residual)
        if sym:
            worst["nu_symmetric"] = max(abs(v) for v in dec.couplings.nu)
    chain = [s.lam for s in run_flow(cfg.lam, cfg.flow_steps, cfg.L)]
    worst["lambda_chain"] = max(abs(a - b) for a, b in zip(chain, lambda_chain(cfg.lam, cfg.flow_steps, cfg.L)))
    return worst


SUITE_RUNNERS: dict[str, Callable[[ExperimentConfig, np.random.Generator], dict[str, float]]] = {
    "flows": suite_flows,
    "free_flow": suite_free_flow,
    "minimizers": suite_minimizers,
    "summation_by_parts": suite_summation_by_parts,
    "resolvent_identity": suite_resolvent_identity,
    "cluster": suite_cluster,
    "renorm": suite_renorm,
}


# ---------------------------------------------------------------------------
# subcommands


@dataclass
class Outcome:
    summary: dict[str, Any]
    tables: dict[str, str]
    exit_code: int = 0


def _csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def cmd_verify(cfg: ExperimentConfig, rng: np.random.Generator) -> Outcome:
    rows = []
    for name in cfg.suites:
        for check, val in SUITE_RUNNERS[name](cfg, rng).items():
            rows.append((name, check, float(val), cfg.tol, int(val <= cfg.tol)))
    failed = [f"{r[0]}/{r[1]}" for r in rows if not r[4]]
    summary = {
        "checks": {f"{r[0]}/{r[1]}": r[2] for r in rows},
        "failed": failed,
        "passed": not failed,
    }
    table = _csv(["suite", "check", "residual", "tolerance", "pass"], rows)
    return Outcome(summary, {"verify": table}, 0 if not failed else 1)


def cmd_decay(cfg: ExperimentConfig, rng: np.random.Generator) -> Outcome:
    from .blockavg import MultiscaleLayout
    from .geometry import LatticeGeometry, RegionSequence
    from .greens import RandomWalkExpansion, decay_profile, dense_green

    rows = []
    for m in cfg.decay_m:
        g = LatticeGeometry(cfg.L, m, 2, max(cfg.decay_mvol, m + 2), d=1, k=2)
        if g.n_sites > cfg.max_sites:
            raise ConfigError(f"infeasible size: decay scan at m={m} needs {g.n_sites} sites")
        seq = RegionSequence.standard(g, drop_last_masks(g, 2))
        lay = MultiscaleLayout(seq)
        p = _params(cfg, d=1)
        G = dense_green(lay, p).matrix
        prof = decay_profile(G, seq)
        walk = RandomWalkExpansion.from_params(lay, p)
        diag = walk.partial_sums(12)
        err = diag.errors(G)[-1]
        rows.append((m, cfg.L**m, prof.gamma_hat("G"), prof.gamma_hat("dG"), float(err), float(diag.spectral_radius)))
    gammas = [r[2] for r in rows]
    summary = {
        "gamma_hat": {str(r[1]): r[2] for r in rows},
        "gamma_nondecreasing": all(b >= a - 1e-12 for a, b in zip(gammas, gammas[1:])),
        "walk_relative_error": {str(r[1]): r[4] for r in rows},
    }
    table = _csv(["m", "M", "gamma_hat_G", "gamma_hat_dG", "walk_error_order12", "spectral_radius"], rows)
    return Outcome(summary, {"decay": table})


def cmd_cluster(cfg: ExperimentConfig, rng: np.random.Generator) -> Outcome:
    from .cluster import full_pipeline
    from .polymers import popcount

    system, measure, ext = _cluster_system(cfg, rng)
    rep = full_pipeline(system, measure, ext, n_cap=cfg.cluster_n_cap)
    rows = [(Y, popcount(Y), float(v)) for Y, v in sorted(rep.hsharp.items())]
    summary = rep.to_json()
    summary["n_polymers"] = len(system.polymers)
    return Outcome(summary, {"cluster_hsharp": _csv(["polymer_mask", "cubes", "hsharp"], rows)})


def cmd_flow(cfg: ExperimentConfig, rng: np.random.Generator) -> Outcome:
    from .flows import compare_flows, compare_free_flow
    from .renormflow import run_flow, trajectory_csv

    seq = flow_sequence(cfg)
    p = _params(cfg)
    seq_cmp = compare_flows(seq, p, rng, cfg.samples)
    free_cmp = compare_free_flow(seq, p, rng, cfg.samples)
    rows = []
    for i, ((a, b), (c, e)) in enumerate(zip(seq_cmp.log_values, free_cmp.log_values)):
        rows.append((i, a, b, seq_cmp.residuals[i], c, e, free_cmp.residuals[i]))
    traj = run_flow(cfg.lam, cfg.flow_steps, cfg.L, d=cfg.d)
    summary = {
        "sequential_vs_multiscale": seq_cmp.max_residual,
        "free_flow_closed_form": free_cmp.max_residual,
        "lambda_final": float(traj[-1].lam),
    }
    table = _csv(
        ["sample", "log_sequential", "log_multiscale", "residual", "log_integrated", "log_closed_form", "free_residual"],
        rows,
    )
    return Outcome(summary, {"flow": table, "couplings": trajectory_csv(traj)})


def cmd_polymers(cfg: ExperimentConfig, rng: np.random.Generator) -> Outcome:
    from .polymers import (
        CubeComplex,
        count_labelled_trees,
        count_spanning_trees_matrix_tree,
        enumerate_polymers,
        size_histogram,
        sum_bounds_suite,
    )

    cx = CubeComplex.grid(tuple(cfg.polymer_grid))
    hole = cx.mask_of([tuple(v // 2 for v in cfg.polymer_grid)])
    rep = sum_bounds_suite(
        cx,
        list(cfg.polymer_kappas),
        anchor=cfg.polymer_anchor,
        cap=cfg.polymer_cap,
        superset_bases=[0, 1 << cfg.polymer_anchor],
        omega_mask=cx.full_mask & ~hole,
        length_cap=4,
        distance_cap=min(cfg.polymer_cap, 6),
    )
    cayley = [(n, count_labelled_trees(n), count_spanning_trees_matrix_tree(n), n ** (n - 2)) for n in range(2, 8)]
    hist = size_histogram(p.mask for p in enumerate_polymers(cx, min(cfg.polymer_cap, 5)))
    summary = {
        "thresholds": rep.thresholds,
        "notes": rep.notes,
        "cayley_exact": all(a == b == c for _, a, b, c in cayley),
        "size_histogram": {str(k): v for k, v in sorted(hist.items())},
    }
    return Outcome(
        summary,
        {"polymer_bounds": rep.to_csv(), "cayley": _csv(["n", "prufer", "matrix_tree", "n_pow_n_minus_2"], cayley)},
    )


def cmd_report(cfg: ExperimentConfig, rng: np.random.Generator, out: Path) -> Outcome:
    """Collect the JSON summaries already present in ``out`` into one table."""
    rows = []
    collected = {}
    for path in sorted(out.glob("*.json")):
        if path.name == "report.json":
            continue
        data = json.loads(path.read_text())
        collected[path.stem] = {"config_hash": data.get("config_hash"), "summary": data.get("summary")}
        for key, val in _flatten(data.get("summary", {})):
            rows.append((path.stem, key, val))
    return Outcome({"runs": collected}, {"report": _csv(["run", "key", "value"], rows)})


def _flatten(obj: Any, prefix: str = "") -> list[tuple[str, Any]]:
    if isinstance(obj, dict):
        out = []
        for k in sorted(obj):
            out.extend(_flatten(obj[k], f"{prefix}{k}."))
        return out
    if isinstance(obj, list):
        return [(prefix.rstrip("."), json.dumps(obj))]
    return [(prefix.rstrip("."), obj)]


COMMANDS = ("verify", "decay", "cluster", "flow", "polymers", "report")


def _clean(obj: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_outputs(command: str, cfg: ExperimentConfig, outcome: Outcome, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": cfg.resolved(),
        "config_hash": cfg.content_hash(),
        "versions": {"blockspin": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "summary": _clean(outcome.summary),
        "tables": sorted(f"{name}.csv" for name in outcome.tables),
        "exit_code": outcome.exit_code,
    }
    path = out / f"{command}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for name, text in outcome.tables.items():
        (out / f"{name}.csv").write_text(text)
    return path


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blockspin", description="Block-spin renormalization checks on small lattices.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="key-value config file (INI syntax)")
        sp.add_argument("--seed", type=int, default=None, help="seed for the single random generator")
        sp.add_argument("--out", type=Path, default=Path("blockspin-out"), help="output directory")
        sp.add_argument("--tol", type=float, default=None, help="residual tolerance for verify")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config, {"seed": args.seed, "tol": args.tol})
    except (ConfigError, TypeError) as exc:
        print(f"blockspin: config error: {exc}", file=sys.stderr)
        return 2
    rng = np.random.default_rng(cfg.seed)
    try:
        if args.command == "report":
            outcome = cmd_report(cfg, rng, args.out)
        else:
            runner = {
                "verify": cmd_verify,
                "decay": cmd_decay,
                "cluster": cmd_cluster,
                "flow": cmd_flow,
                "polymers": cmd_polymers,
            }[args.command]
            outcome = runner(cfg, rng)
    except ConfigError as exc:
        print(f"blockspin: config error: {exc}", file=sys.stderr)
        return 2
    path = write_outputs(args.command, cfg, outcome, args.out)
    for key, val in _flatten(_clean(outcome.summary)):
        print(f"{key} = {val}")
    print(f"wrote {path}")
    return outcome.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
