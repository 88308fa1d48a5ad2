"""Pipeline CLI: each subcommand runs one stage over a single TOML config,
persists artifacts under the output directory with content-hashed names,
and prints a one-line JSON summary. All inter-stage state lives in
<out>/state.json; a lock file guards the directory."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
from pathlib import Path

from .checkpoint import Checkpoint
from .clustering import ClusterAssignment, cosine_kmeans, extract_embeddings, run_iterations
from .config import PipelineConfig, dumps_config, load_config
from .corpus import CorpusManifest, TrialList, generate_corpus, make_trials
from .dino import train_dino
from .errors import DependencyError, LockError, SslSpkError
from .scoring import evaluate_trials
from .supervised import large_margin_finetune, train_supervised
from .utils import content_hash, rng_for

STATE = "state.json"


@contextlib.contextmanager
def _dir_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"output directory is locked by another run: {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def _read_state(out: Path) -> dict:
    path = out / STATE
    if path.exists():
        return json.loads(path.read_text())
    return {}


def _write_state(out: Path, state: dict):
    (out / STATE).write_text(json.dumps(state, indent=2, sort_keys=True))


def _stage_seed(cfg: PipelineConfig, tag: str) -> int:
    return int(rng_for(cfg.seed, "stage", tag).integers(0, 2 ** 62))


def _resolved(cfg: PipelineConfig) -> PipelineConfig:
    """Derive every stage seed from the global pipeline seed."""
    return dataclasses.replace(
        cfg,
        dino=dataclasses.replace(cfg.dino, seed=_stage_seed(cfg, "dino")),
        supervised=dataclasses.replace(cfg.supervised, seed=_stage_seed(cfg, "supervised")),
    )


def _corpus_dir(cfg: PipelineConfig, out: Path) -> Path:
    return Path(cfg.corpus_dir) if cfg.corpus_dir else out / "corpus"


def _need(state: dict, key: str, hint: str):
    if key not in state:
        raise DependencyError(f"missing artifact {key!r}; run `{hint}` first")
    return state[key]


def _load_manifest(state: dict, out: Path) -> CorpusManifest:
    return CorpusManifest.load(_need(state, "manifest", "gen-corpus"))


def _save_ckpt(ckpt: Checkpoint, out: Path, stage: str) -> Path:
    blob = ckpt.to_bytes()
    path = out / f"ckpt_{stage}_{content_hash(blob)}.ssvc"
    path.write_bytes(blob)
    return path


def _save_report_jsonl(rows, path: Path):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def cmd_gen_corpus(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    cc = cfg.corpus
    manifest = generate_corpus(
        cc.n_speakers, cc.utts_per_speaker, cc.utt_seconds, cc.sample_rate,
        seed=cfg.seed, n_noise=cc.n_noise, n_music=cc.n_music,
        n_babble=cc.n_babble, n_rir=cc.n_rir, bank_seconds=cc.bank_seconds)
    cdir = _corpus_dir(cfg, out)
    manifest_path = manifest.save(cdir)
    trials = make_trials(manifest, cfg.trials.n_target, cfg.trials.n_nontarget,
                         seed=_stage_seed(cfg, "trials"))
    trials_path = cdir / "trials.txt"
    trials.save(trials_path)
    state["manifest"] = str(manifest_path)
    state["trials"] = str(trials_path)
    return {"manifest": str(manifest_path), "trials": str(trials_path),
            "n_speech": len(manifest.speech()), "n_trials": len(trials.trials)}


def cmd_train_dino(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    manifest = _load_manifest(state, out)
    ckpt = train_dino(manifest, cfg.network, cfg.projection, cfg.dino, cfg.features)
    path = _save_ckpt(ckpt, out, "dino")
    report_path = out / f"report_dino_{content_hash(path.read_bytes())}.jsonl"
    _save_report_jsonl(ckpt.meta["report"], report_path)
    state["dino_ckpt"] = str(path)
    state["latest_ckpt"] = str(path)
    state.setdefault("stages", []).append({"stage": "dino", "ckpt": str(path)})
    last = ckpt.meta["report"][-1]
    return {"ckpt": str(path), "report": str(report_path),
            "final_loss": last["loss"], "kl_from_uniform": last["kl_from_uniform"]}


def cmd_cluster(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    manifest = _load_manifest(state, out)
    ckpt = Checkpoint.load(_need(state, "latest_ckpt", "train-dino"))
    table = extract_embeddings(ckpt, manifest, cfg.features)
    assign = cosine_kmeans(table, cfg.clustering.k, cfg.clustering.kmeans_iters,
                           seed=_stage_seed(cfg, "cluster"))
    blob = "".join(f"{u} {l}\n" for u, l in assign.labels.items()).encode()
    path = out / f"labels_{content_hash(blob)}.txt"
    path.write_bytes(blob)
    state["labels"] = str(path)
    return {"labels": str(path), "k": assign.k, "objective": assign.objective,
            "n_nonempty": len(set(assign.labels.values()))}


def cmd_train_supervised(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    manifest = _load_manifest(state, out)
    labels = ClusterAssignment.load(_need(state, "labels", "cluster"), k=cfg.clustering.k)
    ckpt = train_supervised(manifest, labels, cfg.network, cfg.aam,
                            cfg.supervised, cfg.features)
    path = _save_ckpt(ckpt, out, "supervised")
    state["latest_ckpt"] = str(path)
    state.setdefault("stages", []).append({"stage": "supervised", "ckpt": str(path)})
    return {"ckpt": str(path), "final_loss": ckpt.meta["report"][-1]["loss"]}


def cmd_iterate(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    manifest = _load_manifest(state, out)
    initial = Checkpoint.load(_need(state, "dino_ckpt", "train-dino"))
    ckpts, assignments, history = run_iterations(
        manifest, initial, cfg.clustering, cfg.network, cfg.aam,
        cfg.supervised, cfg.features)
    iter_rows = []
    for i, (ck, assign) in enumerate(zip(ckpts, assignments)):
        path = _save_ckpt(ck, out, f"iter{i + 1}")
        lab_blob = "".join(f"{u} {l}\n" for u, l in assign.labels.items()).encode()
        lab_path = out / f"labels_iter{i + 1}_{content_hash(lab_blob)}.txt"
        lab_path.write_bytes(lab_blob)
        iter_rows.append({"iteration": i, "ckpt": str(path), "labels": str(lab_path)})
        state.setdefault("stages", []).append({"stage": f"iter{i + 1}", "ckpt": str(path)})
    history_path = out / "iterate_history.jsonl"
    _save_report_jsonl(history, history_path)
    state["iterations"] = iter_rows
    state["labels"] = iter_rows[-1]["labels"]
    state["latest_ckpt"] = iter_rows[-1]["ckpt"]
    return {"iterations": len(iter_rows), "history": str(history_path),
            "final_ckpt": iter_rows[-1]["ckpt"]}


def cmd_finetune_lm(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    manifest = _load_manifest(state, out)
    base = Checkpoint.load(_need(state, "latest_ckpt", "iterate"))
    labels = ClusterAssignment.load(_need(state, "labels", "cluster"), k=cfg.clustering.k)
    trials = TrialList.load(_need(state, "trials", "gen-corpus"))
    ft = cfg.finetune
    rows = []
    keep_path = None
    for chunk_s in ft.chunk_sweep:
        ck = large_margin_finetune(
            base, manifest, labels, cfg.features, cfg.aam, cfg.supervised.augment,
            chunk_seconds=chunk_s, epochs=ft.epochs, lr=ft.lr,
            batch_size=cfg.supervised.batch_size, seed=_stage_seed(cfg, f"finetune{chunk_s}"))
        path = _save_ckpt(ck, out, f"finetune{chunk_s:g}s")
        report = evaluate_trials(ck, manifest, trials, cfg.features)
        rows.append({"chunk_seconds": chunk_s, "eer": report.eer, "ckpt": str(path)})
        if chunk_s == ft.chunk_seconds:
            keep_path = str(path)
    table_path = out / "finetune_segment_sweep.json"
    table_path.write_text(json.dumps(rows, indent=2))
    state["finetune_sweep"] = rows
    if keep_path:
        state["latest_ckpt"] = keep_path
        state.setdefault("stages", []).append({"stage": "finetune", "ckpt": keep_path})
    return {"sweep": rows, "table": str(table_path)}


def cmd_score(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    manifest = _load_manifest(state, out)
    ckpt = Checkpoint.load(_need(state, "latest_ckpt", "train-dino"))
    trials = TrialList.load(_need(state, "trials", "gen-corpus"))
    report = evaluate_trials(ckpt, manifest, trials, cfg.features)
    blob = "".join(f"{s:.8f} {a} {b}\n" for _, a, b, s in report.scores).encode()
    path = out / f"scores_{content_hash(blob)}.txt"
    path.write_bytes(blob)
    state["scores"] = str(path)
    return {"scores": str(path), "n_trials": len(report.scores)}


def cmd_eval(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    manifest = _load_manifest(state, out)
    ckpt_path = _need(state, "latest_ckpt", "train-dino")
    ckpt = Checkpoint.load(ckpt_path)
    trials = TrialList.load(_need(state, "trials", "gen-corpus"))
    report = evaluate_trials(ckpt, manifest, trials, cfg.features)
    blob = "".join(f"{s:.8f} {a} {b}\n" for _, a, b, s in report.scores).encode()
    scores_path = out / f"scores_{content_hash(blob)}.txt"
    scores_path.write_bytes(blob)
    row = {"stage": ckpt.meta.get("stage", "unknown"), "ckpt": ckpt_path,
           "eer": report.eer, "threshold": report.threshold_at_eer,
           "n_target": sum(1 for t in report.scores if t[0] == 1),
           "n_nontarget": sum(1 for t in report.scores if t[0] == 0),
           "scores": str(scores_path)}
    state.setdefault("evals", []).append(row)
    return row


def cmd_report(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    evals = state.get("evals", [])
    if not evals:
        raise DependencyError("no evaluations recorded; run `eval` first")
    stage_rows = [{"stage": e["stage"], "ckpt": e["ckpt"], "eer": e["eer"]} for e in evals]
    table = {"stage_eer": stage_rows}
    if "finetune_sweep" in state:
        table["segment_length_eer"] = [
            {"chunk_seconds": r["chunk_seconds"], "eer": r["eer"]}
            for r in state["finetune_sweep"]]
    path = out / "report.json"
    path.write_text(json.dumps(table, indent=2))
    return {"report": str(path), **table}


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-dino": cmd_train_dino,
    "cluster": cmd_cluster,
    "train-supervised": cmd_train_supervised,
    "iterate": cmd_iterate,
    "finetune-lm": cmd_finetune_lm,
    "score": cmd_score,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslspk",
                                     description="self-supervised speaker verification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline TOML config")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def run_command(command: str, config_path, seed=None, out=None) -> dict:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(out))
    cfg.validate()
    cfg = _resolved(cfg)
    out_dir = Path(cfg.out_dir)
    with _dir_lock(out_dir):
        state = _read_state(out_dir)
        summary = COMMANDS[command](cfg, out_dir, state)
        (out_dir / "config_echo.toml").write_text(dumps_config(cfg))
        _write_state(out_dir, state)
    return {"cmd": command, **summary}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = run_command(args.command, args.config, args.seed, args.out)
    except SslSpkError as exc:
        print(json.dumps({"error": {"kind": exc.kind, "message": str(exc)}}))
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": {"kind": "io", "message": str(exc)}}))
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
