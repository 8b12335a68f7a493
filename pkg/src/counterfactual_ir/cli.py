"""Command-line driver: ``cfir <command> --config run.toml [--seed N] [--jobs N] [--out DIR]``.

Every command validates the whole configuration before doing any work.
Exit codes: 0 success, 2 configuration or input validation error, 3 runtime
or scorer error (failing records are listed in ``errors.jsonl``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Optional

from . import pipeline
from .attribution import METHODS, RESOLUTIONS, attribute
from .contrastive import LossWeights, ReferenceEncoder, normalized_shapley
from .corpus import (
    corpus_stats,
    load_documents,
    load_queries,
    load_triples,
    read_jsonl,
    segment,
    tokenize,
    write_jsonl,
)
from .counterfactual import ModificationMode
from .evaluation import parse_pct, robustness_report, write_report
from .scoring import Bm25Index, Bm25Scorer, EmbeddingScorer, RemoteScorer, StoreEncoder, read_embeddings

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("cfir")

COMMANDS = ("segment", "stats", "attribute", "counterfactual", "attack", "loss-check", "eval", "pipeline")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    """Invalid configuration or input data; maps to exit code 2."""


# -- configuration --------------------------------------------------------------

def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(map(str, options))}")
        return v
    return check


def _int_min(lo):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int) or v < lo:
            raise ValueError(f"must be an integer >= {lo}")
        return v
    return check


def _real(lo=None, hi=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError("must be a number")
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ValueError(f"must lie in [{lo}, {hi}]")
        return float(v)
    return check


def _string(v):
    if not isinstance(v, str) or not v:
        raise ValueError("must be a non-empty string")
    return v


def _boolean(v):
    if not isinstance(v, bool):
        raise ValueError("must be true or false")
    return v


def _table(v):
    if not isinstance(v, dict):
        raise ValueError("must be a table")
    return v


def _list(v):
    if not isinstance(v, list):
        raise ValueError("must be a list")
    return v


MODES = ("deletion", "modification", "replacement")

# section -> field -> (validator, default); a default of ``None`` means optional
SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "": {"seed": (_int_min(0), 42), "jobs": (_int_min(1), None), "out": (_string, "out")},
    "corpus": {"documents": (_string, None), "queries": (_string, None), "triples": (_string, None)},
    "segment": {"window_size": (_int_min(2), 128), "overlap_ratio": (_real(0.0, 0.99), 0.5)},
    "scorer": {
        "kind": (_choice("bm25", "embedding", "remote", "reference"), "bm25"),
        "k1": (_real(0.0), 0.9), "b": (_real(0.0, 1.0), 0.4),
        "embeddings": (_string, None), "similarity": (_choice("cosine", "dot"), "cosine"),
        "url": (_string, None), "timeout": (_real(0.001), 30.0), "max_in_flight": (_int_min(1), 8),
        "batch_size": (_int_min(1), 64), "hash_size": (_int_min(1), 128), "dim": (_int_min(1), 16),
    },
    "attribution": {
        "method": (_choice(*METHODS), "shapley"), "resolution": (_choice(*RESOLUTIONS), "merge"),
        "num_permutations": (_int_min(1), 5000), "mode": (_choice(*MODES), "deletion"),
        "word_ratio": (_real(1e-12, 1.0), 0.15), "pool_size": (_int_min(1), 100),
    },
    "counterfactual": {
        "key_source": (_choice("gold", "attribution"), "gold"), "per_passage": (_boolean, True),
    },
    "adversarial": {"epsilon": (_real(0.0, 1.0), 0.05), "num_candidates": (_int_min(1), 32)},
    "attack": {
        "kind": (_choice("ts"), "ts"), "ratio": (_real(0.0, 1.0), 0.05), "num_targets": (_int_min(1), 1),
        "pool_size": (_int_min(1), 100), "k": (_int_min(1), 10),
    },
    "loss": {
        "strategy": (_choice("rel", "shapley", "plugin"), "rel"),
        "alpha": (_real(), None), "beta": (_real(), None), "scores": (_table, None),
        "num_negatives": (_int_min(1), 7), "batch_size": (_int_min(1), 8),
        "hash_size": (_int_min(1), 128), "dim": (_int_min(1), 16),
        "epsilon_fd": (_real(1e-7, 1e-3), 1e-5),
    },
    "eval": {"attributions": (_string, None), "k": (_int_min(1), 10), "robustness": (_list, None),
             "attack_report": (_string, None)},
}

NEEDS_CORPUS = {
    "segment": ("documents", "triples"), "stats": ("documents", "triples"),
    "attribute": ("documents", "queries", "triples"), "counterfactual": ("documents", "queries", "triples"),
    "attack": ("documents", "queries", "triples"), "eval": ("documents", "queries", "triples"),
    "pipeline": ("documents", "queries", "triples"), "loss-check": (),
}


def load_config(path: Optional[str]) -> dict:
    """Read a TOML (or, for ``.json`` files, JSON) configuration."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        if p.suffix.lower() == ".json":
            raw = json.loads(p.read_text(encoding="utf-8"))
        else:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a table")
    return raw


def validate(raw: dict, command: str, base_dir: Path = Path(".")) -> dict:
    """Fill defaults and check every field; all problems are reported together."""
    errors = []
    cfg: dict[str, dict] = {}
    for section, fields in SCHEMA.items():
        given = raw if section == "" else raw.get(section, {})
        if section and not isinstance(given, dict):
            errors.append(f"{section}: must be a table")
            continue
        out = {}
        for key, value in given.items():
            if section == "" and key in SCHEMA:
                continue
            name = f"{section}.{key}" if section else key
            if key not in fields:
                errors.append(f"{name}: unknown field")
                continue
            try:
                out[key] = fields[key][0](value)
            except ValueError as exc:
                errors.append(f"{name}: {exc}")
        for key, (_, default) in fields.items():
            out.setdefault(key, default)
        cfg[section] = out

    if not errors:
        errors += _cross_checks(cfg, command, base_dir)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def _resolve(base_dir: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base_dir / p


def _cross_checks(cfg: dict, command: str, base_dir: Path) -> list[str]:
    errors = []
    for key in ("documents", "queries", "triples"):
        path = cfg["corpus"][key]
        if path is None:
            if key in NEEDS_CORPUS[command]:
                errors.append(f"corpus.{key}: required by {command}")
        elif not _resolve(base_dir, path).is_file():
            errors.append(f"corpus.{key}: file not found: {path}")
        else:
            cfg["corpus"][key] = str(_resolve(base_dir, path))
    seg = cfg["segment"]
    stride = seg["window_size"] * (1 - seg["overlap_ratio"])
    if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
        errors.append("segment.overlap_ratio: window_size * (1 - overlap_ratio) must be a positive integer")
    sc = cfg["scorer"]
    if sc["kind"] == "embedding":
        if sc["embeddings"] is None:
            errors.append("scorer.embeddings: required for kind 'embedding'")
        elif not _resolve(base_dir, sc["embeddings"]).is_file():
            errors.append(f"scorer.embeddings: file not found: {sc['embeddings']}")
        else:
            sc["embeddings"] = str(_resolve(base_dir, sc["embeddings"]))
    if sc["kind"] == "remote" and sc["url"] is None:
        errors.append("scorer.url: required for kind 'remote'")
    at = cfg["attribution"]
    if at["method"].startswith("shapley"):
        if at["resolution"] == "none" and seg["overlap_ratio"] != 0.0:
            errors.append("attribution.resolution: 'none' needs segment.overlap_ratio = 0 for Shapley methods")
        if at["resolution"] != "none" and seg["overlap_ratio"] > 0.5:
            errors.append("attribution.resolution: even/odd groups need segment.overlap_ratio <= 0.5")
    loss = cfg["loss"]
    if loss["strategy"] == "plugin" and (loss["alpha"] is None or loss["beta"] is None):
        errors.append("loss.alpha/loss.beta: required for strategy 'plugin'")
    if loss["scores"] is not None:
        missing = [k for k in ("s_pos", "s_partial", "s_full", "s_adv", "s_negs") if k not in loss["scores"]]
        if missing:
            errors.append(f"loss.scores: missing {', '.join(missing)}")
        elif loss["strategy"] != "plugin":
            errors.append("loss.scores: explicit scores need strategy 'plugin' with alpha and beta")
    ev = cfg["eval"]
    if command == "eval":
        # an explicit path is relative to the config file; the default lives in the output directory
        path = _resolve(base_dir, ev["attributions"]) if ev["attributions"] else Path(cfg[""]["out"]) / "attributions.jsonl"
        if not path.is_file():
            errors.append(f"eval.attributions: file not found: {path}")
        else:
            ev["attributions"] = str(path)
        if ev["attack_report"] is not None:
            if not _resolve(base_dir, ev["attack_report"]).is_file():
                errors.append(f"eval.attack_report: file not found: {ev['attack_report']}")
            else:
                ev["attack_report"] = str(_resolve(base_dir, ev["attack_report"]))
    for i, row in enumerate(ev["robustness"] or []):
        if not (isinstance(row, dict) and {"before", "after"} <= set(row)):
            errors.append(f"eval.robustness[{i}]: needs before and after")
        elif not isinstance(row["before"], (int, float)) or not row["before"] > 0:
            errors.append(f"eval.robustness[{i}].before: must be > 0")
    return errors


# -- building blocks ------------------------------------------------------------

class Context:
    """Loaded corpus, scorer and output directory for one invocation."""

    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.command = command
        top = cfg[""]
        self.seed = top["seed"]
        self.jobs = top["jobs"] or os.cpu_count() or 1
        self.out = Path(top["out"])
        self.documents = self.queries = self.triples = None
        self._prepared = None
        self._scorer = None
        self._index = None
        self.errors: list[dict] = []
        self._load()

    def _load(self):
        c = self.cfg["corpus"]
        try:
            if c["documents"]:
                self.documents = load_documents(c["documents"])
            if c["queries"] and self.command not in ("segment", "stats"):
                self.queries = load_queries(c["queries"])
            if c["triples"] and self.documents is not None:
                self.triples = load_triples(c["triples"], self.documents, self.queries)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"corpus: {exc}") from None
        if NEEDS_CORPUS[self.command] and not self.triples:
            raise ConfigError("corpus.triples: no triples")

    @property
    def prepared(self):
        if self._prepared is None:
            seg = self.cfg["segment"]
            try:
                self._prepared = pipeline.prepare(self.documents, self.queries, self.triples,
                                                  seg["window_size"], seg["overlap_ratio"])
            except ValueError as exc:
                raise ConfigError(f"corpus: {exc}") from None
        return self._prepared

    @property
    def index(self) -> Bm25Index:
        if self._index is None:
            sc = self.cfg["scorer"]
            self._index = Bm25Index.build(self.documents.values(), sc["k1"], sc["b"])
        return self._index

    @property
    def scorer(self):
        if self._scorer is None:
            sc = self.cfg["scorer"]
            if sc["kind"] == "bm25":
                self._scorer = Bm25Scorer(self.index)
            elif sc["kind"] == "embedding":
                try:
                    store = read_embeddings(sc["embeddings"], sc["similarity"])
                except ValueError as exc:
                    raise ConfigError(f"scorer.embeddings: {exc}") from None
                self._scorer = EmbeddingScorer(StoreEncoder(store), sc["similarity"])
            elif sc["kind"] == "remote":
                self._scorer = RemoteScorer(sc["url"], timeout=sc["timeout"], max_in_flight=sc["max_in_flight"],
                                            batch_size=sc["batch_size"])
            else:
                enc = ReferenceEncoder.random(sc["hash_size"], sc["dim"], seed=self.seed)
                self._scorer = EmbeddingScorer(enc, sc["similarity"])
        return self._scorer

    def mode(self):
        at = self.cfg["attribution"]
        return ModificationMode(at["mode"], at["word_ratio"])

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def record_errors(self, step: str, errors):
        for e in errors:
            log.error("%s: record %d (%s, %s): %s", step, e.index, e.query_id, e.doc_id, e.error)
            self.errors.append({"command": step, **e.to_json()})


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -------------------------------------------------------------------

def cmd_segment(ctx: Context, stats_only: bool = False):
    seg_cfg = ctx.cfg["segment"]
    cache, records = {}, []
    try:
        for t in ctx.triples:
            if t.doc_id not in cache:
                cache[t.doc_id] = segment(ctx.documents[t.doc_id], seg_cfg["window_size"], seg_cfg["overlap_ratio"])
            seg = cache[t.doc_id].with_positive(tokenize(t.relevant_passage_text))
            if seg.positive_index is None:
                log.warning("triple (%s, %s): gold passage coverage %.3f below threshold",
                            t.query_id, t.doc_id, seg.positive_coverage)
            records.append((t, seg))
    except ValueError as exc:
        raise ConfigError(f"corpus: {exc}") from None
    stats = corpus_stats(seg for _, seg in records)
    if not stats_only:
        write_jsonl(ctx.path("segmented.jsonl"), ({"query_id": t.query_id, **seg.to_json()} for t, seg in records))
    _write_json(ctx.path("stats.json"), stats.to_json())
    log.info("segmented %d triples: %s", len(records), stats.to_json())


def _attribution_pools(ctx: Context):
    if ctx.cfg["attribution"]["method"] != "delta_rank":
        return None
    return pipeline.bm25_pools(ctx.prepared, ctx.documents, ctx.index, ctx.cfg["attribution"]["pool_size"])


def cmd_attribute(ctx: Context):
    at = ctx.cfg["attribution"]
    records, errors = pipeline.attribute_all(
        ctx.prepared, ctx.scorer, at["method"], at["resolution"], ctx.mode(), at["num_permutations"], ctx.seed,
        _attribution_pools(ctx), ctx.jobs)
    ctx.record_errors("attribute", errors)
    write_jsonl(ctx.path("attributions.jsonl"), records)
    log.info("attributed %d triples (%d failed)", len(records), len(errors))
    return records


def cmd_counterfactual(ctx: Context, attributions: Optional[list] = None):
    cf, adv = ctx.cfg["counterfactual"], ctx.cfg["adversarial"]
    keys: dict = {}
    if cf["key_source"] == "attribution":
        if attributions is None:
            at = ctx.cfg["attribution"]
            attributions, errors = pipeline.attribute_all(
                ctx.prepared, ctx.scorer, at["method"], at["resolution"], ctx.mode(), at["num_permutations"],
                ctx.seed, _attribution_pools(ctx), ctx.jobs)
            ctx.record_errors("counterfactual", errors)
        keys = {(r["query_id"], r["doc_id"]): r["key_index"] for r in attributions}
    todo = [p for p in ctx.prepared
            if cf["key_source"] == "gold" or (p.triple.query_id, p.triple.doc_id) in keys]

    def work(p):
        key = keys.get((p.triple.query_id, p.triple.doc_id)) if keys else None
        return pipeline.counterfactual_records(p, ctx.scorer, key, ctx.mode(), adv["epsilon"],
                                               adv["num_candidates"], ctx.seed, cf["per_passage"])

    results, errors = pipeline.split_errors(todo, pipeline.run_ordered(work, todo, ctx.jobs))
    ctx.record_errors("counterfactual", errors)
    write_jsonl(ctx.path("counterfactuals.jsonl"), (r for group in results for r in group))
    log.info("wrote counterfactuals for %d triples (%d failed)", len(results), len(errors))


def cmd_attack(ctx: Context) -> list[dict]:
    ak = ctx.cfg["attack"]
    try:
        report, attacked = pipeline.term_spam_attack(ctx.prepared, ctx.documents, ctx.scorer, ak["ratio"],
                                                     ak["num_targets"], ak["pool_size"], ak["k"], ctx.seed)
    except ValueError as exc:
        raise ConfigError(f"attack: {exc}") from None
    write_jsonl(ctx.path("attacked.jsonl"), attacked)
    rows = [{"attack": ak["kind"], "metric": f"mrr@{ak['k']}d", "before": report.metric_before,
             "after": report.metric_after, "pct_change": report.rendered}]
    write_report(ctx.out, rows, "attack_report")
    log.info("attack %s: %s -> %s (%s)", ak["kind"], report.metric_before, report.metric_after, report.rendered)
    return rows


def _robustness_rows(ctx: Context, attack_rows: Optional[list]) -> list[dict]:
    rows = list(attack_rows or [])
    ev = ctx.cfg["eval"]
    if ev["attack_report"]:
        rows += json.loads(Path(ev["attack_report"]).read_text(encoding="utf-8"))
    for i, r in enumerate(ev["robustness"] or []):
        rep = robustness_report(float(r["before"]), float(r["after"]))
        rows.append({"attack": str(r.get("attack", f"attack{i}")), "metric": str(r.get("metric", "mrr@10d")),
                     "before": rep.metric_before, "after": rep.metric_after, "pct_change": rep.rendered})
    return rows


def cmd_eval(ctx: Context, attributions: Optional[list] = None, attack_rows: Optional[list] = None):
    ev = ctx.cfg["eval"]
    if attributions is None:
        try:
            attributions = read_jsonl(ev["attributions"])
        except ValueError as exc:
            raise ConfigError(f"eval.attributions: {exc}") from None
    if not attributions:
        raise ConfigError("eval.attributions: no attribution records")
    groups: dict[tuple[str, str], list] = {}
    for r in attributions:
        groups.setdefault((r["method"], r["resolution"]), []).append(r)
    rows = []
    for (method, resolution), recs in sorted(groups.items()):
        try:
            res = pipeline.passage_mrr(ctx.prepared, recs, ev["k"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"eval: {exc}") from None
        rows.append({"method": method, "resolution": resolution, "metric": f"mrr@{ev['k']}p",
                     "value": res.mrr, "evaluated": res.evaluated, "skipped": len(res.skipped)})
    for r in _robustness_rows(ctx, attack_rows):
        rows.append({"metric": r["metric"], "attack": r["attack"], "before": r["before"], "after": r["after"],
                     "pct_change": r["pct_change"], "value": parse_pct(r["pct_change"])})
    write_report(ctx.out, rows, "report")
    log.info("report: %s", [(r.get("method", r.get("attack")), r["value"]) for r in rows])


def cmd_loss_check(ctx: Context):
    loss = ctx.cfg["loss"]
    if loss["scores"] is not None:
        try:
            out = pipeline.direct_loss(loss["scores"], LossWeights(loss["alpha"], loss["beta"], "plugin"))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"loss.scores: {exc}") from None
        _write_json(ctx.path("loss.json"), out)
        return
    encoder = ReferenceEncoder.random(loss["hash_size"], loss["dim"], seed=ctx.seed)
    shares = None
    adv = ctx.cfg["adversarial"]
    if ctx.triples:
        prepared = ctx.prepared[:loss["batch_size"]]
        batch = pipeline.contrastive_batch(prepared, ctx.documents, encoder, ctx.index, loss["num_negatives"],
                                           adv["epsilon"], adv["num_candidates"], ctx.seed)
        if loss["strategy"] == "shapley":
            at = ctx.cfg["attribution"]
            shares = []
            for p in prepared:
                res = attribute(p.query, p.seg, ctx.scorer, at["method"] if at["method"].startswith("shapley")
                                else "shapley", at["resolution"], ctx.mode(), at["num_permutations"], ctx.seed)
                shares.append(normalized_shapley(res.values, res.key_index))
    else:
        if loss["strategy"] == "shapley":
            raise ConfigError("loss.strategy: 'shapley' needs a corpus to attribute")
        batch = pipeline.random_contrastive_batch(ctx.seed, loss["batch_size"], loss["num_negatives"])
    ws = [pipeline.weight_fn(loss["strategy"], loss["alpha"], loss["beta"], shares[i] if shares else None)
          for i in range(len(batch))]
    out = pipeline.loss_summary(encoder, batch, ws, loss["epsilon_fd"], ctx.seed)
    _write_json(ctx.path("loss.json"), out)
    log.info("loss-check: total %.6f, grad check max rel err %.3g", out["total"], out["grad_check_max_rel_err"])


def cmd_pipeline(ctx: Context):
    cmd_segment(ctx)
    attributions = cmd_attribute(ctx)
    cmd_counterfactual(ctx, attributions)
    attack_rows = cmd_attack(ctx)
    cmd_eval(ctx, attributions, attack_rows)


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfir", description="Counterfactual passage attribution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML configuration (JSON if the file ends in .json)")
        p.add_argument("--seed", type=int, help="base random seed (default 42)")
        p.add_argument("--jobs", type=int, help="worker threads (default: logical cores)")
        p.add_argument("--out", help="output directory (default ./out)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = load_config(args.config)
        for flag in ("seed", "jobs", "out"):
            if getattr(args, flag) is not None:
                raw[flag] = getattr(args, flag)
        base_dir = Path(args.config).resolve().parent if args.config else Path(".")
        cfg = validate(raw, args.command, base_dir)
        ctx = Context(cfg, args.command)
        handlers = {
            "segment": cmd_segment, "stats": lambda c: cmd_segment(c, stats_only=True),
            "attribute": cmd_attribute, "counterfactual": cmd_counterfactual, "attack": cmd_attack,
            "loss-check": cmd_loss_check, "eval": cmd_eval, "pipeline": cmd_pipeline,
        }
        handlers[args.command](ctx)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return EXIT_RUNTIME
    stale = ctx.out / "errors.jsonl"
    if not ctx.errors and stale.exists():
        stale.unlink()
    if ctx.errors:
        write_jsonl(ctx.path("errors.jsonl"), ctx.errors)
        log.error("%d record(s) failed; see %s", len(ctx.errors), ctx.path("errors.jsonl"))
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
