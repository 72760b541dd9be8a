"""Command-line entry point: ``python -m keyframe_rl <command> [options]``.

Every config key is also a ``--key value`` flag. Values are resolved as
defaults < ``--preset`` < config file (``--config`` or $KFRL_CONFIG) < flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import env as E
from . import gradcheck
from . import harness as H
from . import nn
from . import sampler as U
from .config import BENCHMARK_OVERRIDES, CONFIG_ENV_VAR, ConfigError, RunConfig, config_fields, default_of, load_config
from .policy import PolicyParams

PRESETS = {"paper": {}, "benchmark": BENCHMARK_OVERRIDES}

SPLIT_FILES = {"all": "all.jsonl", "hard": "hard.jsonl", "eval": "eval.jsonl"}
CKPT_FILES = {
    "pretrained_sampler": "sampler_pretrained.ckpt",
    "joint_sampler": "sampler_joint.ckpt",
    "joint_policy": "policy_joint.ckpt",
}


class CliError(Exception):
    """A user-facing failure; reported as one line with a nonzero exit."""


# ------------------------------------------------------------------ config plumbing


def _key_help(f) -> str:
    meta = f.metadata
    text = f"{meta['help']} (default: {default_of(f)}"
    if meta.get("paper") is not None:
        text += f"; paper: {meta['paper']}"
    return text + ")"


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help=f"key = value config file (default: ${CONFIG_ENV_VAR})")
    parent.add_argument("--preset", choices=sorted(PRESETS), default="paper", help="base settings before the config file (default: paper)")
    parent.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    group = parent.add_argument_group("config keys")
    for f in config_fields():
        group.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="V", default=None, help=_key_help(f))
    return parent


def _keys_epilog() -> str:
    lines = ["config keys (default; paper value where one is stated):"]
    for f in config_fields():
        paper = f.metadata.get("paper")
        extra = f", paper {paper}" if paper is not None else ""
        lines.append(f"  {f.name} = {default_of(f)}{extra}    {f.metadata['help']}")
    return "\n".join(lines)


def _resolve_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides, base=PRESETS[args.preset])


def _dataset_path(cfg: RunConfig, split: str) -> Path:
    path = Path(cfg.data_dir) / SPLIT_FILES[split]
    if not path.is_file():
        raise CliError(f"data_dir: no dataset at {path} (run `gen` first)")
    return path


def _load_split(cfg, split):
    return E.read_episodes(_dataset_path(cfg, split))


def _ckpt_path(cfg, which) -> Path:
    return Path(cfg.ckpt_dir) / CKPT_FILES[which]


def _load_ckpt(cfg, which, loader):
    path = _ckpt_path(cfg, which)
    if not path.is_file():
        raise CliError(f"ckpt_dir: missing checkpoint {path}")
    return loader(path)


def _metrics_path(cfg, phase) -> Path:
    return Path(cfg.metrics_dir) / f"{phase}_{cfg.run_id}.csv"


# ------------------------------------------------------------------ commands


def cmd_gen(cfg: RunConfig, args) -> int:
    train, hard, held = H.build_datasets(cfg)
    out = Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, eps in (("all", train), ("hard", hard), ("eval", held)):
        E.write_episodes(out / SPLIT_FILES[split], eps)
    excluded = sum(ep.excluded for ep in train)
    print(f"wrote {len(train)} training episodes ({excluded} all-pass), {len(hard)} hard, {len(held)} eval to {out}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    episodes = [ep for ep in _load_split(cfg, "all") if not ep.excluded]
    sampler, result = H.pretrain_sampler(episodes, cfg)
    Path(cfg.ckpt_dir).mkdir(parents=True, exist_ok=True)
    sampler.save(_ckpt_path(cfg, "pretrained_sampler"))
    H.write_metrics(_metrics_path(cfg, "pretrain"), result.metrics)
    print(f"pre-trained sampler for {len(result.metrics)} steps on {len(episodes)} episodes -> {_ckpt_path(cfg, 'pretrained_sampler')}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    episodes = [ep for ep in _load_split(cfg, cfg.train_split) if not ep.excluded]
    if cfg.joint_init == "pretrained":
        sampler = _load_ckpt(cfg, "pretrained_sampler", U.SamplerParams.load)
    else:
        sampler = H.initial_sampler(cfg)
    policy, sampler, result = H.joint_train(episodes, cfg, sampler=sampler, policy=H.initial_policy(cfg))
    Path(cfg.ckpt_dir).mkdir(parents=True, exist_ok=True)
    policy.save(_ckpt_path(cfg, "joint_policy"))
    sampler.save(_ckpt_path(cfg, "joint_sampler"))
    H.write_metrics(_metrics_path(cfg, "joint"), result.metrics)
    last = result.metrics[-1]["reward_mean"] if result.metrics else float("nan")
    print(f"joint training: {len(result.metrics)} steps, final reward {last:.3f}")
    return 0


def _models_for(cfg, methods) -> H.Models:
    models = H.Models(frozen_policy=H.initial_policy(cfg))
    if "learned_frozen" in methods:
        models.pretrained_sampler = _load_ckpt(cfg, "pretrained_sampler", U.SamplerParams.load)
    if "learned_joint" in methods:
        models.joint_sampler = _load_ckpt(cfg, "joint_sampler", U.SamplerParams.load)
        models.joint_policy = _load_ckpt(cfg, "joint_policy", PolicyParams.load)
    return models


def _run_eval(cfg, methods):
    episodes = _load_split(cfg, "eval")
    return H.evaluate(episodes, cfg, _models_for(cfg, methods), methods)


def cmd_eval(cfg: RunConfig, args) -> int:
    report = _run_eval(cfg, cfg.method_list)
    report.write(cfg.report_path, timing=cfg.report_timing)
    print(f"{'method':<16}{'accuracy':>10}{'coverage':>10}{'info':>8}")
    for name, r in report.methods.items():
        info = "-" if r.info_mean is None else f"{r.info_mean:.3f}"
        print(f"{name:<16}{r.accuracy:>10.3f}{r.coverage:>10.3f}{info:>8}")
    print(f"report -> {cfg.report_path}")
    return 0


def cmd_compare(cfg: RunConfig, args) -> int:
    report = _run_eval(cfg, [args.a, args.b])
    c = H.paired_comparison(report, args.a, args.b)
    print(f"{c['a']} - {c['b']}: {c['diff']:+.3f} accuracy over {report.n_episodes} episodes ({c['wins']} wins, {c['losses']} losses)")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    if args.inject_bias_fault:
        with gradcheck.inject_bias_fault():
            results = gradcheck.run_suite(args.check_seed)
    else:
        results = gradcheck.run_suite(args.check_seed)
    failed = 0
    for r in results:
        ok = r.passed()
        failed += not ok
        print(f"{r.name:<22} max rel error {r.max_rel_error:.2e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} checks below {gradcheck.TOLERANCE:g}")
    return 1 if failed else 0


def cmd_score(cfg: RunConfig, args) -> int:
    S = E.read_matrix(args.simmat)
    params = U.SamplerParams.load(args.checkpoint)
    scores, _ = U.sampler_forward(params, S)
    sys.stdout.write("".join(f"{s!r}\n" for s in scores.tolist()))
    return 0


COMMANDS = {
    "gen": (cmd_gen, "generate training, hard and evaluation episode files"),
    "pretrain": (cmd_pretrain, "pre-train the sampler with the difficulty-aware advantage"),
    "train": (cmd_train, "joint training of query policy and sampler"),
    "eval": (cmd_eval, "evaluate methods on the held-out episodes and write a report"),
    "compare": (cmd_compare, "paired accuracy comparison of two methods"),
    "gradcheck": (cmd_gradcheck, "finite-difference checks of every backward pass"),
    "score": (cmd_score, "print per-frame sampler scores for a similarity-matrix file"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="keyframe-rl",
        description="Key-frame sampler and query policy trained with reinforcement learning on synthetic video QA.",
        epilog=_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    parent = _config_parent()
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[parent], help=help_text, description=help_text)
        if name == "compare":
            p.add_argument("a", help="first method")
            p.add_argument("b", help="second method")
        elif name == "gradcheck":
            p.add_argument("--check-seed", type=int, default=0, help="seed of the random test fixtures")
            p.add_argument("--inject-bias-fault", action="store_true", help="test hook: corrupt conv bias gradients")
        elif name == "score":
            p.add_argument("simmat", help="SIMMAT text file")
            p.add_argument("checkpoint", help="sampler checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command][0](cfg, args)
    except (CliError, ConfigError, H.DataError, E.FormatError, nn.CheckpointError, OSError) as exc:
        print(f"keyframe-rl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
