"""Command-line entry point: ``modalfuse {generate,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical error.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .data import load_dataset, write_dataset
from .errors import ConfigError, FormatError, ModalFuseError, NumericalError
from .fusion import FusionParams, Variant
from .gradcheck import gradcheck_all
from .kvconfig import format_kv, read_kv
from .retrieval import (
    DEFAULT_CUTOFFS,
    ablate_fusions,
    analyze_gates,
    evaluate,
    gates_csv,
)
from .synth import SyntheticSpec, generate, preset, spec_from_kv
from .trainer import (
    Stage,
    TrainConfig,
    adopt_variant,
    history_csv,
    load_checkpoint,
    load_train_config,
    new_params,
    run_stage2,
    run_stage2_both,
    run_stage3,
    save_checkpoint,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class Manifest:
    def __init__(self, command: str, path: Path):
        self.path = Path(path)
        self.start = time.perf_counter()
        self.fields: Dict[str, object] = {"command": command, "engine_version": __version__}
        self.warnings: List[str] = []

    def set(self, **kw):
        self.fields.update(kw)

    def warn(self, msg: str):
        self.warnings.append(msg)
        print(f"warning: {msg}", file=sys.stderr)

    def write(self, status: str = "ok"):
        out = dict(self.fields)
        out["status"] = status
        for i, w in enumerate(self.warnings):
            out[f"warning.{i}"] = w
        out["wall_clock_seconds"] = f"{time.perf_counter() - self.start:.3f}"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(format_kv(out), encoding="utf-8")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _cutoffs(raw: Optional[str]):
    if not raw:
        return DEFAULT_CUTOFFS
    try:
        vals = tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"cutoffs must be comma-separated integers, got {raw!r}") from None
    if not vals:
        raise ConfigError("no cutoffs given")
    return vals


def _config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


# -- commands -------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.spec:
        spec = spec_from_kv(read_kv(args.spec), str(args.spec))
        source = str(args.spec)
    else:
        spec = preset(args.preset)
        source = f"preset:{args.preset}"
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.split:
        overrides["split"] = args.split
    if overrides:
        spec = SyntheticSpec(**{**spec.__dict__, **overrides})
    man = Manifest("generate", Path(args.manifest or f"{args.embeddings}.manifest"))
    man.set(spec=source, seed=spec.seed, split=spec.split, output_embeddings=args.embeddings,
            output_pairs=args.pairs)
    ds = generate(spec)
    write_dataset(ds, args.embeddings, args.pairs)
    man.set(queries=len(ds.queries), items=len(ds.items), pairs=len(ds.pairs))
    man.write()
    return 0


def _load_start(args, cfg: TrainConfig, dim: int, man: Manifest):
    if args.checkpoint_in:
        params, _, _ = load_checkpoint(args.checkpoint_in, expect_dim=dim)
        man.set(checkpoint_in=args.checkpoint_in, input_stages=",".join(params.stages))
        if cfg.stage is Stage.FUSION and params.variant is not cfg.variant:
            params = adopt_variant(params, cfg)
        return params
    return new_params(dim, cfg)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.checkpoint_out)
    man = Manifest("train", Path(args.manifest or f"{out}.manifest"))
    man.set(config=args.config or "<defaults>", input_embeddings=args.embeddings, input_pairs=args.pairs,
            seed=cfg.seed, stage=cfg.stage.value, variant=cfg.variant.value, checkpoint_out=str(out))
    ds = load_dataset(args.embeddings, args.pairs)
    params = _load_start(args, cfg, ds.dim, man)
    if cfg.stage is Stage.FUSION:
        done = set(params.stages)
        if not {Stage.QUERY_TEXT.value, Stage.QUERY_IMAGE.value} <= done:
            man.warn("FusionAlign started without a Stage II (QueryTextAlign + QueryImageAlign) checkpoint")
        res = run_stage3(ds, params, cfg)
    else:
        res = run_stage2(ds, cfg.stage.modality, params, cfg)
    save_checkpoint(res.params, res.state, cfg, out)
    loss_csv = Path(args.loss_csv or f"{out}.loss.csv")
    _write(loss_csv, history_csv(res.history))
    man.set(loss_csv=str(loss_csv), final_loss=repr(res.history[-1].loss_total),
            output_stages=",".join(res.params.stages))
    man.write()
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out_dir)
    man = Manifest("eval", out / "manifest.txt")
    cutoffs = _cutoffs(args.cutoffs)
    man.set(checkpoint=args.checkpoint, input_embeddings=args.embeddings, input_pairs=args.pairs,
            cutoffs=",".join(map(str, cutoffs)), modality=args.modality)
    ds = load_dataset(args.embeddings, args.pairs)
    params, _, _ = load_checkpoint(args.checkpoint, expect_dim=ds.dim)
    report = evaluate(ds, params, cutoffs, modality=args.modality)
    _write(out / "metrics.csv", report.to_csv())
    _write(out / "metrics.txt", report.to_table(params.variant.value if args.modality == "fused" else args.modality))
    _write(out / "gates.csv", gates_csv(analyze_gates(ds, params)))
    man.set(query_count=report.query_count, excluded_queries=report.excluded_queries,
            zero_gain_queries=",".join(f"{k}:{v}" for k, v in report.zero_gain_queries.items()),
            outputs="metrics.csv,metrics.txt,gates.csv")
    man.write()
    print(report.to_table(params.variant.value), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    man = Manifest("ablate", out / "manifest.txt")
    variants = [Variant.parse(v) for v in args.variants.split(",")] if args.variants else list(Variant)
    man.set(config=args.config or "<defaults>", input_embeddings=args.embeddings, input_pairs=args.pairs,
            seed=cfg.seed, variants=",".join(v.value for v in variants))
    ds = load_dataset(args.embeddings, args.pairs)
    eval_ds = None
    if args.eval_embeddings or args.eval_pairs:
        if not (args.eval_embeddings and args.eval_pairs):
            raise ConfigError("--eval-embeddings and --eval-pairs must be given together")
        eval_ds = load_dataset(args.eval_embeddings, args.eval_pairs)
        man.set(eval_embeddings=args.eval_embeddings, eval_pairs=args.eval_pairs)
    stage2 = run_stage2_both(ds, new_params(ds.dim, cfg), cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(stage2, None, cfg.replace(stage=Stage.QUERY_IMAGE), out / "stage2.ckpt")
    res = ablate_fusions(ds, cfg, variants, eval_ds=eval_ds, stage2_params=stage2)
    for name, params in res.params.items():
        sub = out / name.replace("+", "_")
        sub.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, None, cfg.replace(variant=name), sub / "model.ckpt")
        _write(sub / "loss.csv", history_csv(res.histories[name]))
        _write(sub / "metrics.csv", res.reports[name].to_csv())
        _write(sub / "stage2_checksum.txt", res.stage2_checksums[name] + "\n")
    _write(out / "ablation.csv", res.to_csv())
    _write(out / "ablation.txt", res.table())
    man.set(stage2_checksum=next(iter(res.stage2_checksums.values())))
    man.write()
    print(res.table(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    man = Manifest("gradcheck", Path(args.manifest or "gradcheck.manifest"))
    seed = cfg.seed
    if args.corrupt_tensor is not None and args.corrupt_tensor not in FusionParams.TENSORS:
        raise ConfigError(f"unknown tensor {args.corrupt_tensor!r}")
    man.set(config=args.config or "<defaults>", seed=seed, n_seeds=args.n_seeds, step=args.step, tol=args.tol)
    results = gradcheck_all(cfg.loss, seeds=range(seed, seed + args.n_seeds), step=args.step, tol=args.tol,
                            corrupt=args.corrupt_tensor)
    worst = max(results, key=lambda r: r.report.max_error)
    failures = [r for r in results if not r.report.passed]
    for r in results:
        man.set(**{f"max_error.{r.variant}.seed{r.seed}": f"{r.report.max_error:.3e}"})
    man.set(max_error=f"{worst.report.max_error:.3e}")
    if failures:
        f = failures[0]
        msg = (f"gradient check failed: variant {f.variant} seed {f.seed} tensor {f.report.failed[0]} "
               f"max relative error {f.report.per_tensor[f.report.failed[0]]:.3e} > {args.tol:g}")
        man.write(status="failed")
        raise NumericalError(msg)
    man.write()
    print(f"gradcheck ok: {len(results)} checks, max relative error {worst.report.max_error:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modalfuse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a seeded synthetic dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--spec", help="key=value synthetic spec file")
    src.add_argument("--preset", default="standard", help="named preset (default: standard)")
    g.add_argument("--split", choices=("train", "eval"))
    g.add_argument("--seed", type=int)
    g.add_argument("--embeddings", required=True)
    g.add_argument("--pairs", required=True)
    g.add_argument("--manifest")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run one curriculum stage")
    t.add_argument("--config")
    t.add_argument("--embeddings", required=True)
    t.add_argument("--pairs", required=True)
    t.add_argument("--checkpoint-in")
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--loss-csv")
    t.add_argument("--seed", type=int)
    t.add_argument("--manifest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="nDCG report and gate analysis for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--embeddings", required=True)
    e.add_argument("--pairs", required=True)
    e.add_argument("--cutoffs", help="comma-separated (default 1,3,9,24)")
    e.add_argument("--modality", choices=("fused", "text", "image"), default="fused")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="shared Stage II, then every fusion variant")
    a.add_argument("--config")
    a.add_argument("--embeddings", required=True)
    a.add_argument("--pairs", required=True)
    a.add_argument("--eval-embeddings")
    a.add_argument("--eval-pairs")
    a.add_argument("--variants", help="comma-separated subset (default: all five)")
    a.add_argument("--seed", type=int)
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every variant's loss")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--n-seeds", type=int, default=20)
    c.add_argument("--step", type=float, default=1e-4)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--manifest")
    c.add_argument("--corrupt-tensor", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ModalFuseError as exc:
        print(f"modalfuse {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"modalfuse {args.command}: {exc}", file=sys.stderr)
        return FormatError.exit_code
    except (ValueError, ArithmeticError) as exc:
        code = 3 if isinstance(exc, ArithmeticError) else 1
        print(f"modalfuse {args.command}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
