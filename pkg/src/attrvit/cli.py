"""Command-line entry point.

Subcommands: ``gen`` (synthetic dataset), ``train`` (two-branch loop
with metrics and checkpoints), ``eval`` (localization scoring),
``explain`` (per-class and per-attribute heatmaps), ``ablate`` (config
sweeps), and ``gradcheck`` (finite-difference audit). Every command
accepts ``--config FILE`` plus ``--key=value`` overrides and echoes the
resolved configuration into its output directory. Exit codes: 0 on
success, 1 on validation failure, 2 on numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .attributes import AttributeConfig
from .config import RunConfig, load_config, serialize_config
from .data import (
    FormatError,
    GenerationError,
    make_dataset,
    read_dataset,
    read_ppm,
    write_dataset,
)
from .encoder import ConfigError
from .evaluate import (
    evaluate_model,
    localization_maps,
    minmax_normalize,
    random_mask_baseline,
    render_heatmap,
    upsample_bilinear,
)
from .gradcheck import REGISTRY, TOLERANCE, run_checks
from .model import forward
from .tensor import NumericError, Tensor, grad_check
from .train import TrainState, load_checkpoint, train

_MODEL_SECTIONS = ("train.", "encoder.", "attr.", "loss.")


class _Parser(argparse.ArgumentParser):
    # Usage problems are validation failures, not argparse's exit(2).
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="attrvit", description=__doc__, add_help=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    gen = sub.add_parser("gen", help="write a synthetic scene dataset")
    gen.add_argument("out_dir")

    tr = sub.add_parser("train", help="train on a dataset directory")
    tr.add_argument("data_dir")
    tr.add_argument("run_dir")
    tr.add_argument("--resume", metavar="CHECKPOINT", default=None)

    ev = sub.add_parser("eval", help="score localization on a dataset")
    ev.add_argument("checkpoint")
    ev.add_argument("data_dir")
    ev.add_argument("--report", metavar="FILE", default=None)

    ex = sub.add_parser("explain", help="emit heatmaps for one image")
    ex.add_argument("checkpoint")
    ex.add_argument("image")
    ex.add_argument("out_dir")

    ab = sub.add_parser("ablate", help="train and score a config grid")
    ab.add_argument("data_dir")
    ab.add_argument("out_dir")

    gc = sub.add_parser("gradcheck", help="audit gradients against finite differences")
    gc.add_argument("--inject-broken", action="store_true", help=argparse.SUPPRESS)

    for p in (gen, tr, ev, ex, ab, gc):
        p.add_argument("--config", metavar="FILE", default=None)
    return parser


def _split_overrides(rest: list[str]) -> list[str]:
    overrides = []
    for item in rest:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"overrides use --key=value form, got {item!r}")
        overrides.append(item[2:])
    return overrides


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")


def _load_samples(data_dir: str, num_classes: int):
    samples = read_dataset(data_dir, num_classes=num_classes)
    if not samples:
        raise ConfigError(f"no samples found in {data_dir!r}")
    return samples


def _check_image_size(samples, image_size: int) -> None:
    h, w = samples[0].image.shape[:2]
    if (h, w) != (image_size, image_size):
        raise ConfigError(
            f"dataset images are {h}x{w} but encoder.image_size = {image_size}"
        )


def cmd_gen(cfg: RunConfig, out_dir: str) -> int:
    samples = make_dataset(cfg.data, cfg.gen.count)
    write_dataset(samples, out_dir)
    _echo_config(cfg, Path(out_dir))
    counts = np.zeros(len(cfg.data.classes), dtype=int)
    for sample in samples:
        counts += sample.labels.astype(int)
    print(f"samples = {len(samples)}")
    for name, count in zip(cfg.data.classes, counts):
        print(f"class {name} = {int(count)}")
    print(f"labels = {int(counts.sum())}")
    return 0


def cmd_train(
    cfg: RunConfig, explicit: dict[str, str], data_dir: str, run_dir: str, resume: str | None
) -> int:
    state: TrainState | None = None
    train_cfg = cfg.train
    if resume is not None:
        state = load_checkpoint(resume)
        overridden = any(key.startswith(_MODEL_SECTIONS) for key in explicit)
        if overridden and state.config != cfg.train:
            raise ConfigError(
                "resume: requested training config differs from the checkpoint's"
            )
        train_cfg = state.config
        cfg = dataclasses.replace(cfg, train=train_cfg)
    samples = _load_samples(data_dir, train_cfg.num_classes)
    _check_image_size(samples, train_cfg.encoder.image_size)

    run = Path(run_dir)
    _echo_config(cfg, run)
    state, history = train(
        samples,
        train_cfg,
        state=state,
        metrics_path=run / "metrics.csv",
        checkpoint_path=run / "checkpoint.bin",
    )
    if history:
        print(history[-1].csv_row(state.step))
    print(f"checkpoint = {run / 'checkpoint.bin'}")
    return 0


def cmd_eval(
    cfg: RunConfig, explicit: dict[str, str], checkpoint: str, data_dir: str, report_path
) -> int:
    state = load_checkpoint(checkpoint)
    model_cfg = state.config
    fuse = (
        cfg.train.loss.fuse_layers
        if "loss.fuse_layers" in explicit
        else model_cfg.loss.fuse_layers
    )
    samples = _load_samples(data_dir, model_cfg.num_classes)
    _check_image_size(samples, model_cfg.encoder.image_size)
    params = state.ema if cfg.eval.use_ema else state.theta
    report = evaluate_model(
        params,
        model_cfg.encoder,
        model_cfg.attr,
        fuse,
        samples,
        bg_threshold=cfg.eval.bg_threshold,
        noise_sigma=cfg.eval.noise_sigma,
        noise_seed=cfg.eval.noise_seed,
        batch_size=cfg.eval.batch_size,
    )
    if cfg.eval.baseline:
        baseline = random_mask_baseline(
            samples, model_cfg.num_classes, np.random.default_rng(cfg.eval.noise_seed)
        )
        report.extras["baseline_miou"] = baseline.miou
    text = report.serialize()
    print(text, end="")
    if report_path is not None:
        Path(report_path).write_text(text, encoding="utf-8")
    return 0


def cmd_explain(cfg: RunConfig, checkpoint: str, image_path: str, out_dir: str) -> int:
    state = load_checkpoint(checkpoint)
    model_cfg = state.config
    image = read_ppm(image_path)
    h, w = image.shape[:2]
    if (h, w) != (model_cfg.encoder.image_size,) * 2:
        raise ConfigError(
            f"image is {h}x{w} but the checkpoint expects {model_cfg.encoder.image_size}"
        )
    params = state.ema if cfg.eval.use_ema else state.theta
    out = forward(params, image, model_cfg.encoder, model_cfg.attr, model_cfg.loss.fuse_layers)
    heatmaps = localization_maps(out.maps, params["cls.w"], model_cfg.encoder.image_size)
    gates = minmax_normalize(
        upsample_bilinear(out.attributes.gates.data, model_cfg.encoder.image_size, model_cfg.encoder.image_size)
    )

    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(heatmaps.shape[0]):
        name = f"class_{i:02d}.pgm"
        render_heatmap(heatmaps[i], target / name)
        names.append(name)
    for s in range(gates.shape[0]):
        name = f"gate_{s:02d}.pgm"
        render_heatmap(gates[s], target / name)
        names.append(name)
    (target / "manifest.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    print(f"wrote {len(names)} maps to {out_dir}")
    return 0


_VARIANTS = {
    "full": lambda loss: (loss.alpha, loss.beta),
    "global": lambda loss: (0.0, 0.0),
    "no_dis": lambda loss: (0.0, loss.beta),
    "no_div": lambda loss: (loss.alpha, 0.0),
}


def _parse_list(raw: str, kind, what: str):
    items = [part.strip() for part in raw.split(",") if part.strip()]
    try:
        return [kind(part) for part in items]
    except ValueError:
        raise ConfigError(f"cannot parse {what} list {raw!r}") from None


def _parse_attr_cell(raw: str) -> tuple[int, int]:
    left, sep, right = raw.partition(":")
    if not sep:
        raise ConfigError(f"attribute cell {raw!r} is not count:width")
    return int(left), int(right)


def cmd_ablate(cfg: RunConfig, data_dir: str, out_dir: str) -> int:
    options = cfg.ablate
    variants = _parse_list(options.variants, str, "variant")
    for v in variants:
        if v not in _VARIANTS:
            known = ", ".join(sorted(_VARIANTS))
            raise ConfigError(f"unknown variant {v!r}; known: {known}")
    fuse_set = (
        _parse_list(options.fuse_layers, int, "fuse_layers")
        if options.fuse_layers
        else [cfg.train.loss.fuse_layers]
    )
    attr_set = (
        [_parse_attr_cell(item) for item in _parse_list(options.attributes, str, "attributes")]
        if options.attributes
        else [(cfg.train.attr.attributes, cfg.train.attr.hidden_dim)]
    )
    seeds = _parse_list(options.seeds, int, "seeds")
    if not seeds:
        raise ConfigError("ablate.seeds is empty")
    cells = [(v, k, sc) for v in variants for k in fuse_set for sc in attr_set]
    total = len(cells) * len(seeds)
    if total > options.budget:
        raise ConfigError(
            f"grid of {len(cells)} cells x {len(seeds)} seeds = {total} runs "
            f"exceeds ablate.budget = {options.budget}"
        )

    samples = _load_samples(data_dir, cfg.train.num_classes)
    _check_image_size(samples, cfg.train.encoder.image_size)

    header = "variant,fuse_layers,attributes,hidden_dim,seed,miou,fp_rate,fn_rate"
    rows = [header]
    for variant, fuse, (count, width) in cells:
        alpha, beta = _VARIANTS[variant](cfg.train.loss)
        for seed in seeds:
            run_cfg = dataclasses.replace(
                cfg.train,
                seed=seed,
                loss=dataclasses.replace(
                    cfg.train.loss, fuse_layers=fuse, alpha=alpha, beta=beta
                ),
                attr=AttributeConfig(hidden_dim=width, attributes=count),
            )
            state, _ = train(samples, run_cfg)
            report = evaluate_model(
                state.theta,
                run_cfg.encoder,
                run_cfg.attr,
                fuse,
                samples,
                bg_threshold=cfg.eval.bg_threshold,
                batch_size=cfg.eval.batch_size,
            )
            row = (
                f"{variant},{fuse},{count},{width},{seed},"
                f"{report.miou:.6f},{report.fp_rate:.6f},{report.fn_rate:.6f}"
            )
            rows.append(row)
            print(row, flush=True)

    target = Path(out_dir)
    _echo_config(cfg, target)
    (target / "ablate.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def _broken_check(rng: np.random.Generator) -> float:
    # Detached factor drops half the true product-rule gradient.
    probe = Tensor(rng.normal(size=(3,)) + 1.0)
    return grad_check(lambda t: (t.detach() * t).sum(), probe)


def cmd_gradcheck(cfg: RunConfig, inject_broken: bool) -> int:
    checks = dict(REGISTRY)
    if inject_broken:
        checks["broken.fixture"] = _broken_check
    results, ok = run_checks(checks, seed=cfg.train.seed)
    for name, err in results:
        flag = "ok  " if np.isfinite(err) and err <= TOLERANCE else "FAIL"
        print(f"{flag} {name:32s} {err:.6e}")
    print(f"checks = {len(results)}")
    print(f"max_relative_error = {max(err for _, err in results):.6e}")
    return 0 if ok else 2


def main(argv=None) -> int:
    try:
        parser = _build_parser()
        args, rest = parser.parse_known_args(argv)
        overrides = _split_overrides(rest)
        cfg, explicit = load_config(args.config, overrides, command=args.command)
        if args.command == "gen":
            return cmd_gen(cfg, args.out_dir)
        if args.command == "train":
            return cmd_train(cfg, explicit, args.data_dir, args.run_dir, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, explicit, args.checkpoint, args.data_dir, args.report)
        if args.command == "explain":
            return cmd_explain(cfg, args.checkpoint, args.image, args.out_dir)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.data_dir, args.out_dir)
        return cmd_gradcheck(cfg, args.inject_broken)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FormatError, GenerationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
