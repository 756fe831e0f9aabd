"""``funcmap`` command-line front end.

Every subcommand writes into ``--out`` atomically: outputs are assembled in a
scratch directory and moved into place only after the stage succeeds, together
with an ``artifact.json`` manifest (config hash, input hashes, file hashes).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence


from . import artifacts as A
from . import dsp
from . import encoder as E
from . import pipeline as P
from . import recon as R
from .nnkit.checkpoint import CorruptArtifactError

log = logging.getLogger("funcmap")

IDENTITY_OBJECTIVE = {"func1": "psc", "func2": "msc"}


def _threads() -> None:
    raw = os.environ.get("FUNCMAP_THREADS")
    if raw:
        import torch

        n = int(raw)
        if n < 1:
            raise P.ConfigError("FUNCMAP_THREADS must be >= 1")
        torch.set_num_threads(n)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=float))


def _load_dataset(path: str):
    return A.load_artifact(path, "dataset")


def _inputs(**dirs) -> dict[str, str]:
    return {name: A.manifest_hash(d) for name, d in dirs.items() if d}


# -- subcommands ------------------------------------------------------------------------------


def cmd_simgen(args, rc: P.RunConfig) -> None:
    ds = P.make_dataset(rc)
    A.save_artifact(ds, args.out, config_text=rc.effective_text)


def cmd_preprocess(args, rc: P.RunConfig) -> None:
    ds = _load_dataset(args.data)
    with A.atomic_dir(args.out) as tmp:
        enc, trf = [], []
        for i in range(len(ds)):
            prov = dsp.Provenance(int(ds.subject[i]), int(ds.session[i]), int(ds.channel[i]), str(ds.region[i]))
            raw = dsp.RawTrace(ds.waveforms[i], ds.fs, prov)
            enc.extend(dsp.preprocess_encoder_branch(raw))
            trf.extend(dsp.preprocess_transformer_branch(raw))
        dsp.save_windows(enc, tmp, "encoder_windows")
        dsp.save_windows(trf, tmp, "transformer_windows")
        _write_json(tmp / "metrics.json", {"kind": "preprocess", "n_encoder_windows": len(enc),
                                            "n_transformer_windows": len(trf)})
        A.write_manifest(tmp, "windows", config_text=rc.effective_text, inputs=_inputs(data=args.data))


def cmd_train_encoder(args, rc: P.RunConfig) -> None:
    ds = _load_dataset(args.data)
    tab = P.encoder_segments(ds)
    model, res = P.train_encoder_stage(tab, rc, args.objective, ds.spec.regions)
    with A.atomic_dir(args.out) as tmp:
        E.write_curves(res.curves, tmp / "curves.csv")
        A.save_artifact(model, tmp / "model", config_text=rc.effective_text, inputs=_inputs(data=args.data),
                        extra={"objective": args.objective, "train_subjects": rc.encoder_subjects(args.objective)})
        _write_json(tmp / "metrics.json", {"kind": "train-encoder", "objective": args.objective,
                                            "best_epoch": res.best_epoch, "best_val": res.best_val,
                                            "final": res.curves[-1] if res.curves else None})
        A.write_manifest(tmp, "encoder-run", config_text=rc.effective_text, inputs=_inputs(data=args.data))


def _encoder_from(path: str):
    path = Path(path)
    d = path / "model" if (path / "model").is_dir() else path
    m = A.verify_manifest(d, "encoder")
    return A.load_artifact(d, "encoder"), m["extra"], d


def cmd_eval_embedding(args, rc: P.RunConfig) -> None:
    ds = _load_dataset(args.data)
    model, meta, enc_dir = _encoder_from(args.encoder)
    objective = meta.get("objective", "psc")
    train_subjects = meta.get("train_subjects", list(range(ds.spec.n_subjects)))
    tab = P.encoder_segments(ds)
    modes = [args.mode.replace("-", "_")] if args.mode else ["held_out_subject", "held_out_time", "held_out_channel"]
    report = P.embedding_report(model, tab, train_subjects, objective, k=rc.eval["k"], modes=modes)
    report["kind"] = "eval-embedding"
    held_out = sorted(set(range(ds.spec.n_subjects)) - set(train_subjects)) or None
    with A.atomic_dir(args.out) as tmp:
        Z = E.embed_batch(model, tab.X)
        proj, _ = P.ev.pca_project(Z, 3)
        with open(tmp / "pca.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "session", "region", "channel", "split", "pc1", "pc2", "pc3"])
            for i in range(len(tab)):
                w.writerow([tab.subject[i], tab.session[i], tab.region[i], tab.channel[i], tab.split[i], *proj[i]])
        if args.probes:
            report["saliency"] = P.saliency_stage(model, ds, tab, rc, held_out)
            report["sweep"] = P.sweep_stage(model, tab, rc, objective, train_subjects)
        _write_json(tmp / "metrics.json", report)
        A.write_manifest(tmp, "embedding-metrics", config_text=rc.effective_text, inputs=_inputs(data=args.data, encoder=enc_dir))


def cmd_train_recon(args, rc: P.RunConfig) -> None:
    ds = _load_dataset(args.data)
    if args.region:
        rc.recon["region"] = args.region
        rc.validate()
    enc_dir = None
    if args.identity == "coord":
        ids = R.compute_channel_identities("coordinate", ds)
    else:
        if not args.encoder:
            raise P.ConfigError(f"--identity {args.identity} needs --encoder")
        model, meta, enc_dir = _encoder_from(args.encoder)
        want = IDENTITY_OBJECTIVE[args.identity]
        if meta.get("objective") != want:
            raise P.ConfigError(f"--identity {args.identity} expects a {want} encoder, got {meta.get('objective')}")
        ids = R.compute_channel_identities("functional", ds, encoder=model, segments=P.encoder_segments(ds))
    data = R.recon_data_from_dataset(ds)
    model, res = P.train_recon_stage(data, ids, rc)
    with A.atomic_dir(args.out) as tmp:
        A.save_artifact(model, tmp / "model", config_text=rc.effective_text, inputs=_inputs(data=args.data, encoder=enc_dir),
                        extra={"identity": args.identity, "region": rc.recon["region"]},
                        sidecars={"identities.json": R.identities_json(ids)})
        with open(tmp / "curves.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "val_loss"])
            w.writeheader()
            w.writerows(res.curves)
        _write_json(tmp / "metrics.json", {"kind": "train-recon", "identity": args.identity, "region": rc.recon["region"],
                                            "best_epoch": res.best_epoch, "best_val": res.best_val,
                                            "initial_val": res.initial_val})
        A.write_manifest(tmp, "recon-run", config_text=rc.effective_text, inputs=_inputs(data=args.data, encoder=enc_dir))


def cmd_eval_recon(args, rc: P.RunConfig) -> None:
    ds = _load_dataset(args.data)
    path = Path(args.model)
    d = path / "model" if (path / "model").is_dir() else path
    meta = A.verify_manifest(d, "recon")["extra"]
    model = A.load_artifact(d, "recon")
    ids = R.load_identities(d / "identities.json")
    region = args.region or meta["region"]
    data = R.recon_data_from_dataset(ds)
    rows = P.evaluate_recon_model(model, data, ids, region)
    subjects = list(range(ds.spec.n_subjects))
    per, summary = P.subject_scores(rows, subjects)
    with A.atomic_dir(args.out) as tmp:
        R.write_r_csv(rows, tmp / "r.csv")
        _write_json(tmp / "metrics.json", {"kind": "recon-scores", "region": region,
                                            "models": {meta["identity"]: {"per_subject": per, **summary}},
                                            "subjects": subjects})
        A.write_manifest(tmp, "recon-metrics", config_text=rc.effective_text, inputs=_inputs(data=args.data, model=d))


def cmd_baselines(args, rc: P.RunConfig) -> None:
    ds = _load_dataset(args.data)
    region = args.region or rc.recon["region"]
    rc.recon["region"] = region
    rc.validate()
    data = R.recon_data_from_dataset(ds)
    subjects = list(range(ds.spec.n_subjects))
    models = {}
    with A.atomic_dir(args.out) as tmp:
        for kind in rc.baselines["kinds"]:
            rows = P.baseline_rows(kind, data, rc, subjects)
            R.write_r_csv(rows, tmp / f"r_{kind}.csv")
            per, summary = P.subject_scores(rows, subjects)
            models[kind] = {"per_subject": per, **summary}
        _write_json(tmp / "metrics.json", {"kind": "recon-scores", "region": region, "models": models, "subjects": subjects})
        A.write_manifest(tmp, "recon-metrics", config_text=rc.effective_text, inputs=_inputs(data=args.data))


def cmd_report(args, rc: P.RunConfig) -> None:
    from . import report

    metrics = []
    for d in args.inputs:
        p = Path(d) / "metrics.json"
        if not p.exists():
            raise FileNotFoundError(f"missing metrics file {p}")
        metrics.append((Path(d), json.loads(p.read_text())))
    with A.atomic_dir(args.out) as tmp:
        report.build_report(metrics, tmp)
        A.write_manifest(tmp, "report", config_text=rc.effective_text, inputs={str(d): A.manifest_hash(d) for d, _ in metrics})


COMMANDS = {
    "simgen": cmd_simgen,
    "preprocess": cmd_preprocess,
    "train-encoder": cmd_train_encoder,
    "eval-embedding": cmd_eval_embedding,
    "train-recon": cmd_train_recon,
    "eval-recon": cmd_eval_recon,
    "baselines": cmd_baselines,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="funcmap", description="Functional-embedding pipeline on simulated LFP data.")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_, data=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="sectioned key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
        p.add_argument("--out", required=True, help="output directory (written atomically)")
        if data:
            p.add_argument("--data", required=True, help="dataset directory from `simgen`")
        return p

    add("simgen", "generate the synthetic dataset", data=False)
    add("preprocess", "run both preprocessing branches and store the windows")
    p = add("train-encoder", "train the functional-embedding encoder")
    p.add_argument("--objective", choices=("psc", "msc"), default="psc")
    p = add("eval-embedding", "k-NN region classification, PCA and optional probes")
    p.add_argument("--encoder", required=True)
    p.add_argument("--mode", choices=("held-out-subject", "held-out-time", "held-out-channel"))
    p.add_argument("--probes", action="store_true", help="also run perturbation saliency and the frequency sweep")
    p = add("train-recon", "train the masked-region reconstruction transformer")
    p.add_argument("--identity", choices=("func1", "func2", "coord"), default="func2")
    p.add_argument("--encoder", help="encoder run directory (func1: psc, func2: msc)")
    p.add_argument("--region")
    p = add("eval-recon", "score a reconstruction model on held-out windows")
    p.add_argument("--model", required=True)
    p.add_argument("--region")
    p = add("baselines", "fit and score the per-subject baselines")
    p.add_argument("--region")
    p = sub.add_parser("report", help="aggregate metrics into tables and SVG figures")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--inputs", nargs="+", required=True, help="stage output directories holding metrics.json")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0) if exc.code in (0, None) else 2
    try:
        _threads()
        rc = P.RunConfig.from_file(args.config, args.seed)
        COMMANDS[args.command](args, rc)
    except (P.ConfigError, CorruptArtifactError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"funcmap {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
