"""``lorapre`` command line: ``run``, ``sweep-rank`` and ``verify``.

Exit codes: 0 success, 1 failed verification, 2 bad arguments or config,
3 numeric abort (partial outputs are still written).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .diagnostics import run_bounds, steady_state
from .optimizers import LOW_RANK_ADAM, LOW_RANK_MUON, AdamConfig, MuonConfig
from .problems import low_rank_sensing_problem, quadratic_problem, tiny_mlp_problem
from .training import run_training

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

RUN_COLUMNS = ("step", "loss", "grad_norm", "e_m", "e_v", "delta_subspace", "wall_ms")
SWEEP_COLUMNS = ("rank", "final_loss", "steady_E_ss", "state_entries", "route")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class QuadraticSpec(_Strict):
    kind: Literal["quadratic"]
    p: int = Field(32, ge=1, le=512)
    q: int = Field(32, ge=1, le=512)
    condition: float = Field(100.0, ge=1.0)


class SensingSpec(_Strict):
    kind: Literal["sensing"]
    p: int = Field(32, ge=1, le=512)
    q: int = Field(24, ge=1, le=512)
    true_rank: int = Field(4, ge=1)
    noise_std: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _rank_fits(self):
        if self.true_rank > min(self.p, self.q):
            raise ValueError(f"true_rank {self.true_rank} exceeds min(p, q) = {min(self.p, self.q)}")
        return self


class MlpSpec(_Strict):
    kind: Literal["mlp"]
    input_dim: int = Field(8, ge=1, le=256)
    hidden_dim: int = Field(32, ge=1, le=256)
    classes: int = Field(4, ge=2, le=256)
    n_samples: int = Field(64, ge=1)


class ExperimentConfig(_Strict):
    problem: Union[QuadraticSpec, SensingSpec, MlpSpec] = Field(discriminator="kind")
    optimizer: Literal["adam", "muon", "lorapre_adam", "lorapre_muon"] = "lorapre_adam"
    lr: Optional[float] = Field(None, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.95, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    gamma1: Optional[float] = Field(None, gt=0.0, le=1.0)
    gamma2: Optional[float] = Field(None, gt=0.0, le=1.0)
    rank: int = Field(8, ge=1)
    damping: float = Field(1e-8, gt=0.0)
    scale: float = Field(0.25, gt=0.0)
    eps_inside_sqrt: bool = True
    momentum: float = Field(0.95, ge=0.0, lt=1.0)
    ns_iterations: int = Field(5, ge=1)
    # Adam fallback for 1-D parameters under Muon
    adam_lr: float = Field(1e-3, gt=0.0)
    steps: int = Field(1000, ge=1, le=1_000_000)
    seed: int = Field(0, ge=0)
    shadow_oracle: bool = False
    schedule: Literal["constant", "warmup_cosine"] = "constant"
    warmup_steps: int = Field(0, ge=0)
    out: str = "lorapre_out"

    @property
    def is_muon(self) -> bool:
        return self.optimizer.endswith("muon")

    def adam_config(self, rank: Optional[int] = None, lr: Optional[float] = None) -> AdamConfig:
        return AdamConfig(
            lr=lr or self.lr or 1e-3, beta1=self.beta1, beta2=self.beta2,
            eps=self.eps, weight_decay=self.weight_decay, gamma1=self.gamma1, gamma2=self.gamma2,
            rank=rank or self.rank, damping=self.damping, scale=self.scale,
            eps_inside_sqrt=self.eps_inside_sqrt,
        )

    def optimizer_config(self, rank: Optional[int] = None) -> Union[AdamConfig, MuonConfig]:
        if not self.is_muon:
            return self.adam_config(rank)
        return MuonConfig(
            lr=self.lr if self.lr is not None else 0.02, momentum=self.momentum,
            weight_decay=self.weight_decay, gamma1=self.gamma1, rank=rank or self.rank,
            damping=self.damping, ns_iterations=self.ns_iterations,
            adam=self.adam_config(rank, lr=self.adam_lr),
        )

    def build_problem(self):
        spec = self.problem
        if spec.kind == "quadratic":
            return quadratic_problem(spec.p, spec.q, spec.condition, seed=self.seed)
        if spec.kind == "sensing":
            return low_rank_sensing_problem(spec.p, spec.q, spec.true_rank, spec.noise_std, seed=self.seed)
        return tiny_mlp_problem(spec.input_dim, spec.hidden_dim, spec.classes, spec.n_samples, seed=self.seed)


class ConfigError(Exception):
    pass


def _describe(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(part) for part in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse and validate a JSON config; every failure becomes a :class:`ConfigError`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = ExperimentConfig.model_validate(raw)
        cfg.optimizer_config()
    except ValidationError as exc:
        raise ConfigError(f"{path}: {_describe(exc)}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def run_csv_text(record) -> str:
    rows = zip(range(1, len(record.loss) + 1), record.loss, record.grad_norm, record.e_m,
               record.e_v, record.delta_subspace, record.wall_ms)
    return _csv_text(RUN_COLUMNS, rows)


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    return value


def _summary_text(cfg: ExperimentConfig, record, bounds) -> str:
    lines = [
        f"optimizer: {record.optimizer}",
        f"problem: {cfg.problem.kind}",
        f"seed: {record.seed}",
        f"steps: {len(record.loss)}/{record.steps}",
        f"status: {'aborted: ' + record.error if record.error else 'ok'}",
    ]
    if record.loss:
        lines.append(f"initial_loss: {_fmt(record.loss[0])}")
        lines.append(f"final_loss: {_fmt(record.loss[-1])}")
    lines.append(f"state_entries: {record.memory['total_entries']} (dense {record.memory['dense_total_entries']}, ratio {record.memory['ratio_exact']})")
    for name, kind in record.routing.items():
        lines.append(f"route {name}: {kind}")
    for name, rep in bounds.items():
        lines.append(f"bounds {name}: E_ss {_fmt(rep.E_ss)} E_bound {_fmt(rep.E_bound)} violations {rep.recursion_violations}/{rep.recursion_violations_measured}")
    return "\n".join(lines) + "\n"


def execute_run(cfg: ExperimentConfig, out_dir: Path, timing: bool = False) -> int:
    record = run_training(
        cfg.build_problem(), cfg.optimizer, cfg.optimizer_config(), steps=cfg.steps,
        shadow_oracle=cfg.shadow_oracle, seed=cfg.seed, schedule=cfg.schedule,
        warmup_steps=cfg.warmup_steps, timing=timing,
    )
    bounds = run_bounds(record) if record.loss else {}
    _atomic_write(out_dir / "run.csv", run_csv_text(record))
    report = {name: _json_safe(rep.as_dict()) for name, rep in bounds.items()}
    _atomic_write(out_dir / "bounds.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    _atomic_write(out_dir / "summary.txt", _summary_text(cfg, record, bounds))
    if record.error:
        print(f"error: numeric abort after {len(record.loss)} steps: {record.error}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {out_dir / 'run.csv'} ({len(record.loss)} steps, final loss {_fmt(record.final_loss)})")
    return EXIT_OK


def cmd_run(config_path, out: Optional[str] = None, seed: Optional[int] = None,
            shadow: Optional[bool] = None, timing: bool = False) -> int:
    try:
        cfg = load_config(config_path, {"seed": seed, "shadow_oracle": shadow, "out": out})
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return execute_run(cfg, Path(cfg.out), timing=timing)


def svg_line_chart(xs: Sequence[float], ys: Sequence[float], title: str, x_label: str, y_label: str) -> str:
    """Static SVG polyline of ``log10(y)`` against ``log2(x)``."""
    width, height, pad = 480, 320, 56
    px = [math.log2(x) for x in xs]
    py = [math.log10(max(y, 1e-300)) for y in ys]
    x_lo, x_hi = min(px), max(px)
    y_lo, y_hi = min(py), max(py)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(v):
        return pad + (v - x_lo) / x_span * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y_lo) / y_span * (height - 2 * pad)

    points = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(px, py))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 16}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label}</text>',
        f'<text x="16" y="{height / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {height / 2:.0f})">{y_label}</text>',
    ]
    for x, a in zip(xs, px):
        parts.append(f'<text x="{sx(a):.2f}" y="{height - pad + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{x:g}</text>')
    for v in (y_lo, y_hi):
        parts.append(f'<text x="{pad - 4}" y="{sy(v):.2f}" text-anchor="end" font-family="sans-serif" font-size="10">1e{v:.1f}</text>')
    parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{points}"/>')
    for a, b in zip(px, py):
        parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="3" fill="steelblue"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def parse_ranks(text: str) -> List[int]:
    try:
        ranks = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--ranks must be comma-separated integers, got {text!r}") from None
    if not ranks or min(ranks) < 1:
        raise ConfigError(f"--ranks needs at least one positive rank, got {text!r}")
    return ranks


def cmd_sweep_rank(config_path, ranks, out: Optional[str] = None, seed: Optional[int] = None,
                   shadow: Optional[bool] = None) -> int:
    """One run per rank with a shared seed; writes ``sweep.csv`` and ``chart.svg``.

    The shadow oracle is on unless disabled, since ``steady_E_ss`` needs it.
    Ranks that do not fit the parameter shapes are routed dense and marked.
    """
    try:
        if isinstance(ranks, str):
            ranks = parse_ranks(ranks)
        cfg = load_config(config_path, {"seed": seed, "shadow_oracle": True if shadow is None else shadow, "out": out})
        if not cfg.optimizer.startswith("lorapre"):
            raise ConfigError("optimizer: sweep-rank needs a lorapre_* optimizer")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(cfg.out)
    rows = []
    status = EXIT_OK
    for rank in ranks:
        run_cfg = cfg.model_copy(update={"rank": rank})
        record = run_training(
            run_cfg.build_problem(), cfg.optimizer, run_cfg.optimizer_config(), steps=cfg.steps,
            shadow_oracle=cfg.shadow_oracle, seed=cfg.seed, schedule=cfg.schedule,
            warmup_steps=cfg.warmup_steps,
        )
        _atomic_write(out_dir / f"rank_{rank}" / "run.csv", run_csv_text(record))
        low_rank = any(k in (LOW_RANK_ADAM, LOW_RANK_MUON) for k in record.routing.values())
        e_ss = steady_state(record.e_m) if record.has_shadow and record.e_m else None
        rows.append((rank, record.loss[-1] if record.loss else None, e_ss,
                     record.memory["total_entries"], "low_rank" if low_rank else "routed_dense"))
        if record.error:
            print(f"error: rank {rank} aborted: {record.error}", file=sys.stderr)
            status = EXIT_NUMERIC
    _atomic_write(out_dir / "sweep.csv", _csv_text(SWEEP_COLUMNS, rows))
    finished = [(r[0], r[1]) for r in rows if r[1] is not None and math.isfinite(r[1])]
    if finished:
        _atomic_write(out_dir / "chart.svg", svg_line_chart(
            [r for r, _ in finished], [loss for _, loss in finished],
            f"final loss vs rank ({cfg.optimizer}, {cfg.problem.kind})", "rank", "final loss",
        ))
    print(f"wrote {out_dir / 'sweep.csv'} ({len(rows)} ranks)")
    return status


def cmd_verify(corrupt_coupling: bool = False) -> int:
    from .verify import run_checks

    results = run_checks(corrupt_coupling=corrupt_coupling)
    for res in results:
        print(res.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--shadow", dest="shadow", action="store_true", default=None,
                        help="enable the dense shadow oracle")
    common.add_argument("--no-shadow", dest="shadow", action="store_false", help="disable the dense shadow oracle")

    parser = argparse.ArgumentParser(prog="lorapre", description="Low-rank momentum optimizer experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run one experiment from a JSON config")
    run.add_argument("config")
    run.add_argument("--timing", action="store_true", help="record wall-clock ms per step (breaks byte-identity)")
    sweep = sub.add_parser("sweep-rank", parents=[common], help="run one experiment per rank")
    sweep.add_argument("config")
    sweep.add_argument("--ranks", required=True, help="comma-separated ranks, e.g. 4,16,64")
    verify = sub.add_parser("verify", help="run the invariant suite")
    verify.add_argument("--corrupt-coupling", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed, args.shadow, args.timing)
    if args.command == "sweep-rank":
        return cmd_sweep_rank(args.config, args.ranks, args.out, args.seed, args.shadow)
    return cmd_verify(corrupt_coupling=args.corrupt_coupling)


if __name__ == "__main__":
    sys.exit(main())
