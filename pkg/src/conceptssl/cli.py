"""Command-line entry point: ``conceptssl <subcommand> [--config FILE] [--section.key VALUE ...]``.

Failures exit nonzero after printing one tab-separated line to stderr:
``error<TAB><ErrorClass><TAB><message>``.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .concept_space import (build_category_space, build_description_space, dedup_embeddings,
                            load_description_groups, load_embeddings, load_space,
                            merge_embedding_sets, save_description_groups, save_embeddings,
                            save_space)
from .config import RunConfig, parse_config
from .errors import ConceptSSLError, ConfigError, InvalidArgumentError
from .evaluation import linear_probe, zero_shot_classify
from .pipeline import build_experiment, gradcheck_suite, run_ablations
from .pretrain import pretrained_encoder
from .synth_world import (export_label_embeddings, generate_dataset, generate_world,
                          load_dataset, save_dataset)
from .trainer import load_checkpoint, run_training, save_checkpoint


GRADCHECK_TOL = 1e-5


class UsageError(ConceptSSLError):
    pass


def split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    """``['--a.b', '1', '--c.d=2']`` -> ``[('a.b', '1'), ('c.d', '2')]``."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(key, f"--{key}", "missing value")
            value = extra[i + 1]
            i += 1
        out.append((key, value))
        i += 1
    return out


# ---------------------------------------------------------------- paths


def out_dir(cfg: RunConfig) -> str:
    path = cfg.run.out_dir
    os.makedirs(path, exist_ok=True)
    return path


def data_dir(cfg: RunConfig) -> str:
    return cfg.run.data_dir or os.path.join(cfg.run.out_dir, "data")


def space_paths(cfg: RunConfig, spaces_dir=None) -> dict:
    base = spaces_dir or os.path.join(cfg.run.out_dir, "spaces")
    return {"C": os.path.join(base, "category.emb"), "D": os.path.join(base, "description.emb")}


def initial_encoder(cfg: RunConfig):
    world = generate_world(cfg.world)
    return pretrained_encoder(world, cfg.encoder, cfg.run.init_seed, cfg.pretrain)


def load_encoder(cfg: RunConfig, checkpoint, branch: str):
    if checkpoint is None:
        return initial_encoder(cfg)
    state = load_checkpoint(checkpoint)
    return state.teacher if branch == "teacher" else state.student


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(cfg: RunConfig, args) -> None:
    world = generate_world(cfg.world)
    target = data_dir(cfg)
    os.makedirs(target, exist_ok=True)
    for split in ("train", "test"):
        ds = generate_dataset(world, split)
        save_dataset(ds, os.path.join(target, f"{split}.lssdata"))
        print(f"{split}: {len(ds)} videos x {ds.video_length} frames")
    category, groups = export_label_embeddings(world)
    save_embeddings(category, os.path.join(target, "category.emb"))
    save_description_groups(groups, os.path.join(target, "descriptions.emb"))
    print(f"wrote {target}")


def cmd_build_space(cfg: RunConfig, args) -> None:
    label_files = args.labels or [os.path.join(data_dir(cfg), "category.emb")]
    merged = merge_embedding_sets(*(load_embeddings(p) for p in label_files))
    kept = dedup_embeddings(merged, cfg.run.dedup_threshold)
    print(f"labels: {len(merged)} merged, {len(kept)} after dedup at {cfg.run.dedup_threshold}")
    paths = space_paths(cfg, args.out)
    os.makedirs(os.path.dirname(paths["C"]), exist_ok=True)
    save_space(build_category_space(kept), paths["C"])
    desc_file = args.descriptions or os.path.join(data_dir(cfg), "descriptions.emb")
    if os.path.exists(desc_file):
        groups = dict(load_description_groups(desc_file))
        missing = [label for label in kept.labels if label not in groups]
        if missing:
            raise InvalidArgumentError(f"no descriptions for labels {missing[:5]}")
        desc = build_description_space([(label, groups[label]) for label in kept.labels],
                                       normalize_each=cfg.run.normalize_descriptions)
        save_space(desc, paths["D"])
    elif args.descriptions:
        raise InvalidArgumentError(f"description file {desc_file} does not exist")
    print(f"wrote {os.path.dirname(paths['C'])}")


def cmd_train(cfg: RunConfig, args) -> None:
    out = out_dir(cfg)
    data = load_dataset(args.data or os.path.join(data_dir(cfg), "train.lssdata"))
    if args.transductive and data.split != "train":
        raise InvalidArgumentError("transductive training runs on a downstream train split")
    spaces = {}
    for key, path in space_paths(cfg, args.spaces).items():
        if os.path.exists(path):
            spaces[key] = load_space(path)
    train_cfg = cfg.train
    needs_d = train_cfg.objective.use_description_space or train_cfg.objective.use_alignment
    if "C" not in spaces or (needs_d and "D" not in spaces):
        raise InvalidArgumentError("concept spaces missing; run build-space first")
    state, init = None, None
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        init = initial_encoder(cfg)
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    def progress(row):
        if row["step"] % 50 == 0:
            print(f"step {row['step']:5d}  loss {row['L_total']:.4f}  "
                  f"teacher entropy {row['teacher_entropy_C']:.3f}", flush=True)

    state = run_training(data, spaces, train_cfg, init=init, state=state,
                         metrics_path=os.path.join(out, "metrics.csv"),
                         checkpoint_dir=ckpt_dir, stop_after=args.steps, progress=progress)
    final = os.path.join(out, "final.ckpt")
    save_checkpoint(state, final)
    print(f"wrote {final} after {state.step} steps")


def cmd_eval_zeroshot(cfg: RunConfig, args) -> None:
    params = load_encoder(cfg, args.checkpoint, args.branch)
    data = load_dataset(args.data or os.path.join(data_dir(cfg), "test.lssdata"))
    space = load_space(args.space or space_paths(cfg)["C"])
    _, report = zero_shot_classify(params, data, space, num_crops=cfg.probe.num_crops)
    print(report.summary())
    report.to_csv(os.path.join(out_dir(cfg), "zeroshot.csv"))


def cmd_eval_linear(cfg: RunConfig, args) -> None:
    params = load_encoder(cfg, args.checkpoint, args.branch)
    train = load_dataset(args.train_data or os.path.join(data_dir(cfg), "train.lssdata"))
    test = load_dataset(args.test_data or os.path.join(data_dir(cfg), "test.lssdata"))
    report = linear_probe(params, train, train.labels, test, test.labels, cfg.probe,
                          num_classes=cfg.world.num_classes)
    print(report.summary())
    report.to_csv(os.path.join(out_dir(cfg), "linear_probe.csv"))


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    def show(row):
        print("  ".join(f"{k}={v:.3e}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
              flush=True)

    rows = gradcheck_suite(args.configs, seed=args.seed, max_coords=args.max_coords,
                           obj=cfg.objective, progress=show)
    worst = max(r["max_rel_error"] for r in rows)
    print(f"max relative error {worst:.3e} over {len(rows)} configurations (tolerance {GRADCHECK_TOL:g})")
    if worst >= GRADCHECK_TOL:
        print(f"error\tGradcheckFailure\tmax relative error {worst:.3e} >= {GRADCHECK_TOL:g}",
              file=sys.stderr)
        return 1
    return 0


def cmd_ablate(cfg: RunConfig, args) -> None:
    exp = build_experiment(cfg.world, cfg.run.normalize_descriptions)
    init = pretrained_encoder(exp.world, cfg.encoder, cfg.run.init_seed, cfg.pretrain)
    variants = args.variants.split(",") if args.variants else None

    def show(row):
        print(f"{row['variant']:24s} zero-shot {row['zero_shot']:.4f} "
              f"(init {row['init_zero_shot']:.4f})", flush=True)

    kwargs = {"variants": variants} if variants else {}
    rows = run_ablations(exp, cfg.encoder, cfg.train, init,
                         cfg.probe if args.probe else None, progress=show, **kwargs)
    path = os.path.join(out_dir(cfg), "ablation.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v)
                        for k, v in r.items()})
    print(f"wrote {path}")


# ---------------------------------------------------------------- dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptssl",
                                     epilog="Any config key can be overridden with --section.key VALUE.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat 'section.key = value' file")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "generate the synthetic world, datasets and label embeddings")
    p = add("build-space", cmd_build_space, "build category/description spaces from LSS-EMB files")
    p.add_argument("--labels", nargs="+", help="label embedding files to merge and deduplicate")
    p.add_argument("--descriptions", help="description group file")
    p.add_argument("--out", help="directory for the space files")
    for name, transductive in (("train", False), ("train-transductive", True)):
        p = add(name, cmd_train, "self-supervised training (labels ignored)"
                if not transductive else "self-supervised training on a downstream train split")
        p.add_argument("--data")
        p.add_argument("--spaces", help="directory holding category.emb/description.emb")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--steps", type=int, help="stop after this many global steps")
        p.set_defaults(transductive=transductive)
    for name, func, help_text in (
            ("eval-zeroshot", cmd_eval_zeroshot, "zero-shot top-1 against a category space"),
            ("eval-linear", cmd_eval_linear, "linear probe on frozen features")):
        p = add(name, func, help_text)
        p.add_argument("--checkpoint", help="omit to evaluate the initial encoder")
        p.add_argument("--branch", choices=("student", "teacher"), default="student")
        if name == "eval-zeroshot":
            p.add_argument("--data")
            p.add_argument("--space")
        else:
            p.add_argument("--train-data")
            p.add_argument("--test-data")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the full loss")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=12)
    p = add("ablate", cmd_ablate, "objective ablation matrix to ablation.csv")
    p.add_argument("--variants", help="comma-separated subset of the ablation names")
    p.add_argument("--probe", action="store_true", help="also run linear probes")
    return parser


def _fail(exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"error\t{type(exc).__name__}\t{message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = parse_config(args.config, split_overrides(extra))
        os.makedirs(cfg.run.out_dir, exist_ok=True)
        cfg.write(os.path.join(cfg.run.out_dir, f"config.{args.command}.txt"))
        code = args.func(cfg, args)
    except (ConfigError, UsageError) as exc:
        return _fail(exc, 2)
    except (ConceptSSLError, OSError) as exc:
        return _fail(exc, 1)
    except Exception as exc:  # last resort: still one parseable line
        return _fail(exc, 3)
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
