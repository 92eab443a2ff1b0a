"""Command-line orchestration: ingest -> profile -> fit-risk -> train ->
evaluate -> score -> serve, plus synth and report.

Every stage is idempotent given identical inputs, reads its dependencies
from the working directory, embeds the resolved config hash in what it
writes, and exits nonzero naming the missing artifact when a dependency
has not been produced yet.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path

import click
import numpy as np

from .config import ConfigError, PipelineConfig
from .crpnet.features import (
    AssembledDataset,
    FeatureSchema,
    FittedArtifacts,
    extract_features,
    fit_schema,
    stratified_split,
)
from .crpnet.network import NetworkConfig, load_checkpoint, save_checkpoint
from .crpnet.training import score as score_rows, train_on_dataset
from .profiler import (
    ClassModel,
    SizeThresholds,
    TypeVocabulary,
    assign_classes,
    build_profiles,
    fit_size_thresholds,
    fit_type_vocabulary,
)
from .riskmodel import (
    FREQ_LABELS,
    NEG_INF,
    RiskTables,
    VOLUME_LABELS,
    apply_risk_filter,
    calibrate_filter_threshold,
    fit_risk_tables,
)
from .reporting import write_report
from .synthgen import SynthConfig, generate, validate_patterns, write_sidecar
from .txstore import DEFAULT_RATES, RateTable, TransactionStore, load_csv, write_csv

COMMANDS = (
    "ingest", "synth", "profile", "fit-risk", "train",
    "evaluate", "score", "serve", "report",
)


class MissingArtifactError(FileNotFoundError):
    """A stage dependency has not been produced yet."""


class StageError(RuntimeError):
    """A stage failed; the message is user-facing."""


# --- artifact paths ---------------------------------------------------------


def _paths(config: PipelineConfig) -> dict[str, Path]:
    w = config.workdir
    return {
        "data_csv": w / "data.csv",
        "patterns": w / "patterns.json",
        "store": w / "store.bin",
        "thresholds": w / "thresholds.json",
        "vocab": w / "vocab.json",
        "classes": w / "classes.json",
        "profiles": w / "profiles.json",
        "risktables": w / "risktables.json",
        "schema": w / "schema.json",
        "features": w / "features.npz",
        "checkpoints": w / "checkpoints",
        "history": w / "history",
        "metrics": w / "metrics",
        "predictions": w / "predictions",
        "report_root": w / "report",
    }


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path} (run `crpaml {producer}` first)")
    return path


def _rate_table(config: PipelineConfig) -> RateTable:
    path = config["paths"]["rate_table"]
    return RateTable.from_file(path) if path else DEFAULT_RATES


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- stages -----------------------------------------------------------------


def cmd_synth(config: PipelineConfig) -> dict:
    paths = _paths(config)
    config.workdir.mkdir(parents=True, exist_ok=True)
    synth = config["synth"]
    synth_config = SynthConfig(
        n_accounts=synth["n_accounts"],
        n_background_txns=synth["n_background_txns"],
        illicit_ratio=synth["illicit_ratio"],
        pattern_mix=dict(synth["pattern_mix"]),
        seed=synth["seed"],
        time_span=int(synth["time_span_days"]) * 24 * 3600,
    )
    store, instances = generate(synth_config)
    violations = validate_patterns(store, instances)
    if violations:
        raise StageError(f"generator produced invalid patterns: {violations[:3]}")
    write_csv(store.records, paths["data_csv"])
    write_sidecar(instances, paths["patterns"])
    click.echo(
        f"synth: {len(store)} transactions, "
        f"{sum(r.is_laundering for r in store)} laundering, "
        f"{len(instances)} pattern instances -> {paths['data_csv']}"
    )
    return {"rows": len(store), "patterns": len(instances)}


def cmd_ingest(config: PipelineConfig) -> dict:
    paths = _paths(config)
    config.workdir.mkdir(parents=True, exist_ok=True)
    source = config["paths"]["input_csv"] or paths["data_csv"]
    source = Path(source)
    if not source.exists():
        raise MissingArtifactError(
            f"missing input CSV {source} (run `crpaml synth` or set paths.input_csv)"
        )
    store, report = load_csv(source, _rate_table(config))
    store.meta = config.hash
    store.save(paths["store"])
    click.echo(
        f"ingest: read {report.rows_read} rows, accepted {report.rows_accepted}, "
        f"rejected {report.rows_rejected} -> {paths['store']}"
    )
    for reason, count in sorted(report.reject_reasons.items()):
        click.echo(f"  reject {reason}: {count}")
    return {"rows_read": report.rows_read, "rows_accepted": report.rows_accepted}


def _load_store(config: PipelineConfig) -> TransactionStore:
    return TransactionStore.load(_require(_paths(config)["store"], "ingest"))


def _split_indices(config: PipelineConfig, store: TransactionStore):
    labels = np.array([r.is_laundering for r in store], dtype=bool)
    return stratified_split(
        labels, config["split"]["test_fraction"], config["split"]["seed"]
    )


def cmd_profile(config: PipelineConfig) -> dict:
    paths = _paths(config)
    store = _load_store(config)
    rate_table = _rate_table(config)
    train_idx, _ = _split_indices(config, store)
    train_records = [store.records[i] for i in train_idx]

    thresholds = fit_size_thresholds(train_records, rate_table)
    vocab = fit_type_vocabulary(
        train_records, thresholds, rate_table, size=config["profile"]["vocab_size"]
    )
    train_store = TransactionStore(train_records)
    class_model = assign_classes(
        build_profiles(train_store, thresholds, rate_table),
        config["profile"]["volume_buckets"],
        config["profile"]["count_buckets"],
    )
    profiles = build_profiles(store, thresholds, rate_table)

    _write_json(paths["thresholds"], {
        "version": 1,
        "config_hash": config.hash,
        "p50_usd": str(thresholds.p50_usd),
        "p80_usd": str(thresholds.p80_usd),
        "p93_usd": str(thresholds.p93_usd),
    })
    _write_json(paths["vocab"], {"version": 1, "config_hash": config.hash, "triples": vocab.to_json()})
    _write_json(paths["classes"], {"version": 1, "config_hash": config.hash, **class_model.to_json()})
    summaries = {}
    for account, profile in sorted(profiles.items()):
        top_ccy = (
            min(profile.currency_hist.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            if profile.currency_hist else None
        )
        top_fmt = (
            min(profile.format_hist.items(), key=lambda kv: (-kv[1], kv[0].value))[0].value
            if profile.format_hist else None
        )
        summaries[account.token()] = {
            "n_in": profile.n_in,
            "n_out": profile.n_out,
            "sum_in_usd": str(profile.sum_in_usd),
            "sum_out_usd": str(profile.sum_out_usd),
            "unique_partners": len(profile.partners),
            "top_currency": top_ccy,
            "top_format": top_fmt,
            "first_seen": profile.first_seen,
            "last_seen": profile.last_seen,
        }
    _write_json(paths["profiles"], {"version": 1, "config_hash": config.hash, "accounts": summaries})
    click.echo(
        f"profile: {len(profiles)} accounts, thresholds "
        f"p50={thresholds.p50_usd} p80={thresholds.p80_usd} p93={thresholds.p93_usd}"
    )
    return {"accounts": len(profiles)}


def cmd_fit_risk(config: PipelineConfig) -> dict:
    paths = _paths(config)
    store = _load_store(config)
    train_idx, _ = _split_indices(config, store)
    train_records = [store.records[i] for i in train_idx]
    tables = fit_risk_tables(
        train_records, _rate_table(config), smoothing=config["risk"]["smoothing"]
    )
    payload = {"config_hash": config.hash, **tables.to_json()}
    _write_json(paths["risktables"], payload)
    click.echo(render_risk_tables(tables))
    return {"prior": tables.prior}


def render_risk_tables(tables: RiskTables) -> str:
    lines = [f"fitted risk tables (prior {tables.prior:.6g}, smoothing {tables.smoothing:g})"]
    lines.append(f"  {'format':<24}{'P(laundering | format)':>24}")
    for name, p in sorted(tables.p_launder_given_format.items()):
        lines.append(f"  {name:<24}{p:>24.3e}")
    lines.append(f"  {'currency':<24}{'P(laundering | currency)':>24}")
    for name, p in sorted(tables.p_launder_given_currency.items()):
        lines.append(f"  {name:<24}{p:>24.3e}")
    lines.append(f"  {'USD volume band':<24}{'P(laundering | band)':>24}")
    for label, p in zip(VOLUME_LABELS, tables.p_launder_given_volume_bucket):
        lines.append(f"  {label:<24}{p:>24.3e}")
    lines.append(f"  {'pair frequency':<24}{'normal':>12}{'laundering':>12}")
    for label, (share_n, share_l) in zip(FREQ_LABELS, tables.freq_bucket_dist):
        lines.append(f"  {label:<24}{share_n:>12.3f}{share_l:>12.3f}")
    lines.append(f"  {'bank relation':<24}{'P(laundering | relation)':>24}")
    for name, p in sorted(tables.p_launder_given_bank_relation.items()):
        lines.append(f"  {name:<24}{p:>24.3e}")
    return "\n".join(lines)


def _load_artifacts(config: PipelineConfig) -> FittedArtifacts:
    paths = _paths(config)
    raw_thresholds = json.loads(_require(paths["thresholds"], "profile").read_text())
    thresholds = SizeThresholds(
        Decimal(raw_thresholds["p50_usd"]),
        Decimal(raw_thresholds["p80_usd"]),
        Decimal(raw_thresholds["p93_usd"]),
    )
    vocab = TypeVocabulary.from_json(
        json.loads(_require(paths["vocab"], "profile").read_text())["triples"]
    )
    class_model = ClassModel.from_json(
        json.loads(_require(paths["classes"], "profile").read_text())
    )
    tables = RiskTables.from_json(
        json.loads(_require(paths["risktables"], "fit-risk").read_text())
    )
    return FittedArtifacts(thresholds, vocab, class_model, tables, _rate_table(config))


def _network_config(config: PipelineConfig, seed: int) -> NetworkConfig:
    return NetworkConfig(seed=seed, **config["network"])


def _build_features(config: PipelineConfig, store: TransactionStore) -> tuple[AssembledDataset, FeatureSchema]:
    """Extract (or load cached) raw features and freeze the schema."""
    paths = _paths(config)
    artifacts = _load_artifacts(config)
    train_idx, val_idx = _split_indices(config, store)
    context_width = config["network"]["context_out"]

    cache = paths["features"]
    if cache.exists() and paths["schema"].exists():
        with np.load(cache, allow_pickle=False) as bundle:
            if str(bundle["config_hash"]) == config.hash:
                schema = FeatureSchema.load(paths["schema"])
                from .crpnet.features import RawFeatures

                raw = RawFeatures(
                    main=bundle["main"],
                    sender_profile=bundle["sender"],
                    receiver_profile=bundle["receiver"],
                    labels=bundle["labels"],
                    composites=bundle["composites"],
                    positions=bundle["positions"],
                )
                dataset = AssembledDataset.build(raw, schema, train_idx, val_idx, tag=config.hash)
                return dataset, schema

    train_store = TransactionStore([store.records[i] for i in train_idx])
    raw_train = extract_features(train_store, artifacts)
    schema = fit_schema(raw_train, np.arange(len(train_store)), context_width, artifacts.vocab)
    schema.save(paths["schema"])

    raw = extract_features(store, artifacts)
    np.savez_compressed(
        cache,
        main=raw.main,
        sender=raw.sender_profile,
        receiver=raw.receiver_profile,
        labels=raw.labels,
        composites=raw.composites,
        positions=raw.positions,
        config_hash=config.hash,
    )
    dataset = AssembledDataset.build(raw, schema, train_idx, val_idx, tag=config.hash)
    return dataset, schema


def _train_single_seed(config_json: str, seed: int) -> dict:
    """Worker entry point; isolated state per process."""
    config = PipelineConfig(json.loads(config_json))
    paths = _paths(config)
    store = _load_store(config)
    dataset, schema = _build_features(config, store)
    result = train_on_dataset(dataset, _network_config(config, seed))
    paths["checkpoints"].mkdir(parents=True, exist_ok=True)
    paths["history"].mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        result.network,
        paths["checkpoints"] / f"seed-{seed}.bin",
        schema.version_hash,
        extra={"config_hash": config.hash, "seed": seed},
    )
    _write_json(
        paths["history"] / f"seed-{seed}.json",
        {
            "config_hash": config.hash,
            "seed": seed,
            "best_epoch": result.best_epoch,
            "best_val_f1": result.best_val_f1,
            "epochs": result.history,
        },
    )
    return {"seed": seed, "best_val_f1": result.best_val_f1, "epochs": len(result.history)}


def _seeds(config: PipelineConfig) -> list[int]:
    seeds = list(config["train"]["seeds"])
    if not seeds:
        raise ConfigError("train.seeds must be non-empty")
    return seeds


def cmd_train(config: PipelineConfig) -> dict:
    store = _load_store(config)
    _build_features(config, store)  # fit schema + warm the cache once
    seeds = _seeds(config)
    outcomes = []
    if len(seeds) == 1:
        outcomes.append(_train_single_seed(config.canonical_json(), seeds[0]))
    else:
        with ProcessPoolExecutor(max_workers=min(2, len(seeds))) as pool:
            futures = [
                pool.submit(_train_single_seed, config.canonical_json(), seed) for seed in seeds
            ]
            outcomes = [f.result() for f in futures]
    for outcome in outcomes:
        click.echo(
            f"train seed {outcome['seed']}: best validation F1 "
            f"{outcome['best_val_f1']:.4f} over {outcome['epochs']} epochs"
        )
    return {"seeds": outcomes}


def cmd_evaluate(config: PipelineConfig) -> dict:
    paths = _paths(config)
    store = _load_store(config)
    dataset, schema = _build_features(config, store)
    risk_filter = bool(config["train"]["risk_filter"])
    labels = dataset.labels[dataset.val_idx].tolist()

    results = []
    for seed in _seeds(config):
        ckpt_path = _require(paths["checkpoints"] / f"seed-{seed}.bin", "train")
        network, schema_hash, meta = load_checkpoint(ckpt_path)
        if schema_hash != schema.version_hash:
            raise StageError(
                f"checkpoint {ckpt_path.name} was trained under schema {schema_hash[:12]}, "
                f"current schema is {schema.version_hash[:12]}"
            )
        predictions = score_rows(network, dataset, dataset.val_idx, risk_filter=False)
        raw_flags = [p.raw_decision for p in predictions]
        composites = [p.composite for p in predictions]
        tau = (
            calibrate_filter_threshold(raw_flags, composites, labels)
            if risk_filter else NEG_INF
        )
        final_flags = apply_risk_filter(raw_flags, composites, tau)

        from .metrics import evaluate as eval_metrics

        raw_metrics = eval_metrics(raw_flags, labels, seed=seed, dataset_tag=dataset.tag)
        filtered_metrics = eval_metrics(final_flags, labels, seed=seed, dataset_tag=dataset.tag)
        payload = {
            "config_hash": config.hash,
            "schema_hash": schema.version_hash,
            "seed": seed,
            "dataset_tag": dataset.tag,
            "tau": tau if math.isfinite(tau) else None,  # JSON-safe
            "risk_filter": risk_filter,
            "raw": raw_metrics.to_json(),
            "filtered": filtered_metrics.to_json(),
            "precision_delta": filtered_metrics.precision - raw_metrics.precision,
        }
        for arm in ("raw", "filtered"):
            payload[arm].pop("seed")
            payload[arm].pop("dataset_tag")
        _write_json(paths["metrics"] / f"seed-{seed}.json", payload)

        paths["predictions"].mkdir(parents=True, exist_ok=True)
        val_csv = paths["predictions"] / f"val-seed-{seed}.csv"
        with open(val_csv, "w", newline="") as fh:
            fh.write(f"# config_hash={config.hash}\n")
            writer = csv.writer(fh)
            writer.writerow(["position", "p_hat", "raw_decision", "composite", "final_decision", "label"])
            for p, final, label in zip(predictions, final_flags, labels):
                writer.writerow(
                    [p.position, f"{p.p_hat:.12g}", int(p.raw_decision),
                     f"{p.composite:.12g}", int(final), int(label)]
                )
        results.append(payload)
        click.echo(
            f"evaluate seed {seed}: F1 raw {raw_metrics.f1:.4f} -> "
            f"filtered {filtered_metrics.f1:.4f} (tau {tau if math.isfinite(tau) else '-inf'})"
        )
    return {"metrics": results}


def cmd_score(config: PipelineConfig, seed: int | None = None) -> dict:
    paths = _paths(config)
    store = _load_store(config)
    dataset, schema = _build_features(config, store)
    artifacts = _load_artifacts(config)
    seed = seed if seed is not None else _seeds(config)[0]
    ckpt_path = _require(paths["checkpoints"] / f"seed-{seed}.bin", "train")
    network, schema_hash, _ = load_checkpoint(ckpt_path)
    if schema_hash != schema.version_hash:
        raise StageError("checkpoint schema hash does not match the current schema")

    metrics_path = paths["metrics"] / f"seed-{seed}.json"
    tau = NEG_INF
    risk_filter = bool(config["train"]["risk_filter"])
    if metrics_path.exists():
        stored = json.loads(metrics_path.read_text())["tau"]
        tau = NEG_INF if stored is None else stored

    predictions = score_rows(network, dataset, tau=tau, risk_filter=risk_filter)
    tables = artifacts.risk_tables
    risk_slice = dataset.schema.block_slice("risk")

    paths["predictions"].mkdir(parents=True, exist_ok=True)
    out_csv = paths["predictions"] / f"all-seed-{seed}.csv"
    with np.load(paths["features"], allow_pickle=False) as bundle:
        raw_main = bundle["main"]
    indicator_names = ("format", "currency", "volume", "frequency", "bank_relation")
    with open(out_csv, "w", newline="") as fh:
        fh.write(f"# config_hash={config.hash}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["position", "p_hat", "raw_decision", "composite", "final_decision"]
            + [f"contrib_{name}" for name in indicator_names]
        )
        for p in predictions:
            r_values = raw_main[p.position, risk_slice.start : risk_slice.start + 5]
            contribs = [math.log(tables.clamp(float(r)) / tables.prior) for r in r_values]
            writer.writerow(
                [p.position, f"{p.p_hat:.12g}", int(p.raw_decision),
                 f"{p.composite:.12g}", int(p.final_decision)]
                + [f"{c:.12g}" for c in contribs]
            )
    n_flagged = sum(p.final_decision for p in predictions)
    click.echo(f"score seed {seed}: {n_flagged} final positives of {len(predictions)} rows -> {out_csv}")
    return {"flagged": n_flagged, "path": str(out_csv)}


def cmd_report(config: PipelineConfig) -> dict:
    paths = _paths(config)
    metrics_dir = _require(paths["metrics"], "evaluate")
    per_seed = []
    for metrics_file in sorted(metrics_dir.glob("seed-*.json")):
        per_seed.append(json.loads(metrics_file.read_text()))
    if not per_seed:
        raise MissingArtifactError("missing artifact metrics/seed-*.json (run `crpaml evaluate` first)")
    histories = {}
    for history_file in sorted(paths["history"].glob("seed-*.json")) if paths["history"].exists() else []:
        payload = json.loads(history_file.read_text())
        histories[payload["seed"]] = payload["epochs"]

    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    out_dir = paths["report_root"] / f"{stamp}-{config.hash}"
    summary = write_report(per_seed, histories, out_dir)
    click.echo((out_dir / "report.txt").read_text())
    click.echo(f"report -> {out_dir}")
    return {"summary": summary, "out_dir": str(out_dir)}


def cmd_serve(config: PipelineConfig, seed: int | None = None) -> dict:
    import uvicorn

    from .caseservice import build_app_from_workdir

    app = build_app_from_workdir(config, seed=seed)
    serve = config["serve"]
    click.echo(f"serving investigator API on {serve['host']}:{serve['port']}")
    uvicorn.run(app, host=serve["host"], port=serve["port"], log_level="warning")
    return {}


def run_command(command: str, config: PipelineConfig, seed: int | None = None) -> int:
    """Dispatch one stage; returns the process exit status."""
    handlers = {
        "synth": cmd_synth,
        "ingest": cmd_ingest,
        "profile": cmd_profile,
        "fit-risk": cmd_fit_risk,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "report": cmd_report,
    }
    try:
        if command == "score":
            cmd_score(config, seed=seed)
        elif command == "serve":
            cmd_serve(config, seed=seed)
        elif command in handlers:
            handlers[command](config)
        else:
            raise ConfigError(f"unknown command {command!r}; expected one of {COMMANDS}")
    except (MissingArtifactError, StageError, ConfigError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


# --- CLI --------------------------------------------------------------------


def _load_cli_config(config_path: str | None, seed: int | None, no_risk_filter: bool) -> PipelineConfig:
    overrides: dict = {}
    if seed is not None:
        overrides.setdefault("train", {})["seeds"] = [seed]
    if no_risk_filter:
        overrides.setdefault("train", {})["risk_filter"] = False
    return PipelineConfig.load(config_path, flag_overrides=overrides)


@click.group(help="Context-risk-predict money laundering detection pipeline.")
def main() -> None:
    pass


def _register(name: str) -> None:
    @main.command(name=name, help=f"Run the {name} stage.")
    @click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                  help="Pipeline config YAML; defaults apply when omitted.")
    @click.option("--seed", type=int, default=None, help="Override train.seeds with one seed.")
    @click.option("--no-risk-filter", is_flag=True, default=False,
                  help="Disable the composite-risk false-positive filter.")
    def _command(config_path, seed, no_risk_filter, _name=name):
        config = _load_cli_config(config_path, seed, no_risk_filter)
        raise SystemExit(run_command(_name, config, seed=seed))


for _name in COMMANDS:
    _register(_name)


if __name__ == "__main__":
    main()
