"""Command-line pipeline: prepare, attack, train, evaluate, report, dump.

All flags are long-form; every run is deterministic given its full flag
set including seeds.  Configuration lives in a flat ``key = value`` file
mirrored by ``fewner config --print-defaults``; command-line flags
override file values, which override defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import attack as attack_mod
from . import corpus as corpus_mod
from . import meta
from .entity_typing import span_repr
from .errors import ConfigError, FewnerError
from .rng import derive_seed

ERROR_PREFIX = "fewner: error:"

# defaults taken from the published method configuration
_METHOD_DEFAULT_KEYS = frozenset(
    {
        "lr_span", "lr_type", "batch_size", "gamma_assign", "gamma_diverse",
        "gamma_facilitate", "gamma_filter", "tau", "margin", "n_components",
        "dropout", "max_len",
    }
)


@dataclass(frozen=True)
class RunConfig(meta.TrainConfig):
    """TrainConfig plus episode-sampling settings and file paths."""

    n_way: int = 5
    k_shot: int = 1
    k_query: int = 2
    count: int = 10
    corpus: str = ""
    lexicon: str = ""
    episodes: str = ""
    attacked_episodes: str = ""
    checkpoint: str = ""
    out: str = ""

    def train_config(self) -> meta.TrainConfig:
        names = [f.name for f in fields(meta.TrainConfig)]
        return meta.TrainConfig(**{n: getattr(self, n) for n in names})


def print_defaults(stream=None) -> None:
    # late-bind stdout so callers that redirect sys.stdout see the output
    stream = sys.stdout if stream is None else stream
    cfg = RunConfig()
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        line = f"{f.name} = {value!r}".replace("'", "")
        if f.name in _METHOD_DEFAULT_KEYS:
            line += "  # method default"
        print(line, file=stream)


def _flag_name(field_name: str) -> str:
    return "--" + field_name.replace("_", "-")


_FIELD_TYPES = {"int": int, "float": float, "str": str, int: int, float: float, str: str}


def _add_config_flags(parser: argparse.ArgumentParser, names: list[str]) -> None:
    by_name = {f.name: f for f in fields(RunConfig)}
    for name in names:
        parser.add_argument(
            _flag_name(name), dest=name, type=_FIELD_TYPES[by_name[name].type], default=None
        )


def _merged_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = meta.kv_to_dataclass(Path(args.config).read_text(encoding="utf-8"), RunConfig, base=cfg)
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            raise ConfigError(f"missing required setting {name!r} (flag {_flag_name(name)})")


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _merged_config(args)
    _require(cfg, "corpus", "out")
    sentences = corpus_mod.parse_corpus(Path(cfg.corpus).read_text(encoding="utf-8"))
    episodes = []
    for i in range(cfg.count):
        episode = corpus_mod.sample_episode(
            sentences, cfg.n_way, cfg.k_shot, cfg.k_query, derive_seed(cfg.seed, "episode", i)
        )
        corpus_mod.validate_episode(episode, n_way=cfg.n_way, k_shot=cfg.k_shot)
        episodes.append(episode)
    corpus_mod.write_episodes(cfg.out, episodes)
    manifest = {
        "corpus": cfg.corpus, "count": cfg.count, "n_way": cfg.n_way,
        "k_shot": cfg.k_shot, "k_query": cfg.k_query, "seed": cfg.seed,
    }
    with open(cfg.out + ".manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(episodes)} episodes to {cfg.out}")
    return 0


def _load_checkpoint_config(checkpoint: str) -> meta.TrainConfig:
    path = Path(checkpoint) / "config.txt"
    if not path.exists():
        raise ConfigError(f"no config snapshot at {path}; train a model first")
    return meta.kv_to_dataclass(path.read_text(encoding="utf-8"), meta.TrainConfig)


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = _merged_config(args)
    _require(cfg, "episodes", "checkpoint", "lexicon", "out")
    span_model = meta.load_stage1(cfg.checkpoint)
    typing_model = meta.load_stage2(cfg.checkpoint)
    base = _load_checkpoint_config(cfg.checkpoint)
    victim_cfg = dataclasses.replace(base, rho=cfg.rho, seed=cfg.seed)
    lexicon = attack_mod.parse_lexicon(Path(cfg.lexicon).read_text(encoding="utf-8"))
    episodes = corpus_mod.read_episodes(cfg.episodes)
    n_success = 0
    n_sentences = 0
    with open(cfg.out, "w", encoding="utf-8", newline="\n") as fh:
        for e_i, episode in enumerate(episodes):
            attacked, records = meta.attack_episode(
                span_model, typing_model, episode, lexicon, victim_cfg,
                derive_seed(cfg.seed, "attack", e_i),
            )
            for rec in (*records["support"], *records["query"]):
                n_success += int(rec["success"])
                n_sentences += 1
            payload = corpus_mod.episode_to_dict(attacked)
            payload["attack"] = records
            fh.write(json.dumps(payload, sort_keys=True) + "\n")
    print(f"attacked {n_sentences} sentences across {len(episodes)} episodes "
          f"({n_success} successes) -> {cfg.out}")
    return 0


def cmd_train_span(args: argparse.Namespace) -> int:
    cfg = _merged_config(args)
    _require(cfg, "episodes", "checkpoint")
    episodes = corpus_mod.read_episodes(cfg.episodes)
    model, history = meta.train_span_stage(episodes, cfg.train_config())
    meta.save_stage1(cfg.checkpoint, model, cfg.train_config(), history)
    last = history[-1]["total"] if history else float("nan")
    print(f"trained span stage on {len(episodes)} episodes "
          f"(final query loss {last:.4f}) -> {cfg.checkpoint}")
    return 0


def cmd_train_type(args: argparse.Namespace) -> int:
    cfg = _merged_config(args)
    _require(cfg, "episodes", "checkpoint")
    stage1 = Path(cfg.checkpoint) / "stage1"
    if not stage1.exists():
        raise ConfigError(f"no stage-1 checkpoint under {cfg.checkpoint}; run train-span first")
    span_model = meta.load_stage1(cfg.checkpoint)
    episodes = corpus_mod.read_episodes(cfg.episodes)
    model, history = meta.train_typing_stage(episodes, cfg.train_config(), span_model=span_model)
    meta.save_stage2(cfg.checkpoint, model, cfg.train_config(), history)
    last = history[-1]["total"] if history else float("nan")
    print(f"trained typing stage on {len(episodes)} episodes "
          f"(final query loss {last:.4f}) -> {cfg.checkpoint}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _merged_config(args)
    _require(cfg, "episodes", "checkpoint", "out")
    span_model = meta.load_stage1(cfg.checkpoint)
    typing_model = meta.load_stage2(cfg.checkpoint)
    eval_cfg = dataclasses.replace(_load_checkpoint_config(cfg.checkpoint), seed=cfg.seed)
    episodes = corpus_mod.read_episodes(cfg.episodes)
    report = meta.evaluate(episodes, span_model, typing_model, eval_cfg, scenario="clean")
    if cfg.attacked_episodes:
        attacked = corpus_mod.read_episodes(cfg.attacked_episodes)
        attacked_report = meta.evaluate(attacked, span_model, typing_model, eval_cfg, scenario="attacked")
        report.scenarios.update(attacked_report.scenarios)
    with open(cfg.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    for name, metrics in sorted(report.scenarios.items()):
        print(f"{name}: F1={metrics.f1:.4f} (P={metrics.precision:.4f}, R={metrics.recall:.4f}, "
              f"span-F1={metrics.span_f1:.4f})")
    return 0


def _format_table(rows: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def _scenario_cell(report: meta.EvalReport, scenario: str, attr: str) -> str:
    if scenario not in report.scenarios:
        return "-"
    return f"{getattr(report.scenarios[scenario], attr):.4f}"


def cmd_report(args: argparse.Namespace) -> int:
    if not args.reports:
        raise ConfigError("report needs at least one report file (--reports)")
    loaded = []
    for path in args.reports:
        loaded.append((Path(path).stem, meta.EvalReport.from_json(Path(path).read_text(encoding="utf-8"))))
    rows = [["run", "clean-F1", "clean-span-F1", "attacked-F1", "attacked-span-F1"]]
    for name, report in loaded:
        rows.append([
            name,
            _scenario_cell(report, "clean", "f1"),
            _scenario_cell(report, "clean", "span_f1"),
            _scenario_cell(report, "attacked", "f1"),
            _scenario_cell(report, "attacked", "span_f1"),
        ])
    text = _format_table(rows)
    gamma_keys = ("gamma_assign", "gamma_diverse", "gamma_facilitate", "gamma_filter")
    gammas = {tuple(r.config.get(k) for k in gamma_keys) for _, r in loaded}
    if len(loaded) > 1 and len(gammas) > 1:
        ablation = [["run", "g-assign", "g-diverse", "g-facilitate", "g-filter", "clean-F1", "attacked-F1"]]
        for name, report in loaded:
            ablation.append(
                [name]
                + [str(report.config.get(k, "-")) for k in gamma_keys]
                + [_scenario_cell(report, "clean", "f1"), _scenario_cell(report, "attacked", "f1")]
            )
        text += "\nablation:\n" + _format_table(ablation)
    print(text, end="")
    if getattr(args, "out", None):
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


def cmd_dump_reps(args: argparse.Namespace) -> int:
    cfg = _merged_config(args)
    _require(cfg, "episodes", "checkpoint", "out")
    typing_model = meta.load_stage2(cfg.checkpoint)
    episodes = corpus_mod.read_episodes(cfg.episodes)
    width = typing_model.encoder.width
    import torch

    rows = 0
    with open(cfg.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("episode,type," + ",".join(f"c{i}" for i in range(width)) + "\n")
        with torch.no_grad():
            for e_i, episode in enumerate(episodes):
                for query in episode.query:
                    if not query.spans:
                        continue
                    H = typing_model.encoder(query.tokens)
                    for sp in query.spans:
                        rep = span_repr(H, (sp.start, sp.end))
                        values = ",".join(repr(float(v)) for v in rep)
                        fh.write(f"{e_i},{sp.type},{values}\n")
                        rows += 1
    print(f"wrote {rows} span representations to {cfg.out}")
    return 0


def cmd_config(args: argparse.Namespace) -> int:
    if not args.print_defaults:
        raise ConfigError("config currently supports --print-defaults only")
    print_defaults()
    return 0


_TRAIN_FLAGS = [f.name for f in fields(meta.TrainConfig)]
_SAMPLING_FLAGS = ["n_way", "k_shot", "k_query", "count"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewner", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, flags: list[str]) -> argparse.ArgumentParser:
        p = sub.add_parser(name)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, help="flat key = value config file")
        _add_config_flags(p, flags)
        return p

    add("prepare", cmd_prepare, ["corpus", "out", "seed"] + _SAMPLING_FLAGS)
    add("attack", cmd_attack, ["episodes", "checkpoint", "lexicon", "out", "rho", "seed"])
    add("train-span", cmd_train_span, ["episodes", "checkpoint"] + _TRAIN_FLAGS)
    add("train-type", cmd_train_type, ["episodes", "checkpoint"] + _TRAIN_FLAGS)
    add("eval", cmd_eval, ["episodes", "attacked_episodes", "checkpoint", "out", "seed"])
    report = sub.add_parser("report")
    report.set_defaults(func=cmd_report)
    report.add_argument("--reports", nargs="+", required=True)
    report.add_argument("--out", default=None)
    add("dump-reps", cmd_dump_reps, ["episodes", "checkpoint", "out", "seed"])
    config = sub.add_parser("config")
    config.set_defaults(func=cmd_config)
    config.add_argument("--print-defaults", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FewnerError, OSError, ValueError) as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
