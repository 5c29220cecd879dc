"""Command-line workflows: synth, mix, pretrain, train, denoise, evaluate,
gradcheck.

Configuration is a flat ``key = value`` text file with ``#`` comments whose
keys mirror the training-config fields one to one (plus ``denoiser_*`` /
``featnet_*`` architecture keys and ``task_*`` descriptions); command-line
flags override file keys.  Every command takes ``--seed`` where randomness
is involved and exits 0 on success, 2 on usage/config errors, 3 on data
errors.  ``SDFL_THREADS`` bounds the per-file fan-out of ``denoise``.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import denoiser as dn
from . import evaluate as ev
from . import featnet as fn
from . import ndgrad as ng
from . import trainer as tr
from . import verify
from .audio import AudioError, Waveform, read_wav, write_wav
from .corpus import (Manifest, SynthSpec, build_mixture_corpus,
                     labels_to_vector, split_pair_id, synth_corpus)


class UsageError(Exception):
    """Bad invocation or configuration (exit code 2)."""


class DataError(Exception):
    """Unusable input data (exit code 3)."""


# ---------------------------------------------------------------------------
# configuration


def parse_config(path) -> dict[str, str]:
    if not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    conf: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        conf[key.strip()] = value.strip()
    return conf


def config_hash(conf: dict[str, str]) -> str:
    text = "\n".join(f"{k}={conf[k]}" for k in sorted(conf))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


_TRAIN_KEYS = {
    "epochs": int,
    "learning_rate": float,
    "seed": int,
    "loss_kind": str,
    "feature_depth": int,
    "calibration_epoch": int,
    "checkpoint_every": int,
}


def train_config(conf: dict[str, str], args) -> tr.TrainConfig:
    kwargs = {}
    for key, cast in _TRAIN_KEYS.items():
        if key in conf:
            try:
                kwargs[key] = cast(conf[key])
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
    for key in ("epochs", "learning_rate", "seed", "loss_kind"):
        override = getattr(args, key, None)
        if override is not None:
            kwargs[key] = override
    if "epochs" not in kwargs:
        raise UsageError("epochs must be set (config key or --epochs)")
    try:
        return tr.TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def denoiser_config(conf: dict[str, str]) -> dn.DenoiserConfig:
    return dn.DenoiserConfig(
        width=int(conf.get("denoiser_width", 64)),
        n_layers=int(conf.get("denoiser_layers", 14)))


def featnet_config(conf: dict[str, str]) -> fn.FeatureNetConfig:
    return fn.FeatureNetConfig(
        n_layers=int(conf.get("featnet_layers", 14)),
        base_width=int(conf.get("featnet_base_width", 32)),
        widen_every=int(conf.get("featnet_widen_every", 5)))


def task_specs_from_config(conf: dict[str, str]) -> list[fn.TaskSpec]:
    names = [t.strip() for t in conf.get("tasks", "").split(",") if t.strip()]
    if not names:
        raise UsageError("config must list tasks (e.g. tasks = scene,tags)")
    specs = []
    for name in names:
        try:
            n_classes = int(conf[f"task_{name}_classes"])
            mode = conf[f"task_{name}_mode"]
        except KeyError as exc:
            raise UsageError(f"missing config key {exc.args[0]} for task {name!r}") \
                from exc
        specs.append(fn.TaskSpec(name, n_classes, mode))
    return specs


def _load_manifest(path) -> Manifest:
    if not Path(path).exists():
        raise UsageError(f"manifest not found: {path}")
    try:
        return Manifest.load(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _resolve(manifest_path, source) -> Path:
    return Path(manifest_path).parent / source


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.spec:
        spec = SynthSpec.load(args.spec)
        if args.seed is not None:
            spec = SynthSpec(**{**spec.__dict__, "seed": args.seed})
    else:
        spec = SynthSpec(n_speech_like=args.n_speech, n_noise_types=args.n_noise,
                         duration_s=args.duration,
                         seed=args.seed if args.seed is not None else 0)
    manifest = synth_corpus(spec, args.out)
    print(f"synthesized {len(manifest.records)} files under {args.out}")
    return 0


def cmd_mix(args) -> int:
    try:
        snrs = [float(s) for s in args.snrs.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --snrs list: {exc}") from exc
    if not snrs:
        raise UsageError("--snrs must list at least one SNR")
    clean_files = sorted(Path(args.clean).glob("*.wav"))
    noise_files = sorted(Path(args.noise).glob("*.wav"))
    if not clean_files:
        raise DataError(f"no .wav files in clean dir {args.clean}")
    if not noise_files:
        raise DataError(f"no .wav files in noise dir {args.noise}")
    clean = [(p.stem, read_wav(p).samples) for p in clean_files]
    noise = [(p.stem, read_wav(p).samples) for p in noise_files]
    outcome = build_mixture_corpus(clean, noise, snrs,
                                   args.seed if args.seed is not None else 0,
                                   args.out)
    for remark in outcome.skipped:
        print(f"warning: {remark}", file=sys.stderr)
    n_noisy = len(outcome.manifest.by_role("noisy"))
    print(f"wrote {n_noisy} mixtures under {args.out} "
          f"(manifest.csv, mix_details.csv)")
    return 0


def _classifier_tasks(manifest: Manifest, manifest_path,
                      specs: list[fn.TaskSpec]) -> list[tr.ClassifierTask]:
    tasks = []
    for spec in specs:
        files = []
        for rec in manifest.by_role("classifier"):
            if rec.task != spec.name:
                continue
            files.append(tr.ClassifierFile(
                source=str(_resolve(manifest_path, rec.source)),
                labels=labels_to_vector(rec.labels, spec.n_classes)))
        if not files:
            raise DataError(f"manifest has no classifier files for task "
                            f"{spec.name!r}")
        tasks.append(tr.ClassifierTask(spec, files))
    return tasks


def cmd_pretrain(args) -> int:
    conf = parse_config(args.config)
    cfg = train_config(conf, args)
    specs = task_specs_from_config(conf)
    manifest = _load_manifest(args.manifest)
    tasks = _classifier_tasks(manifest, args.manifest, specs)
    meta = {"seed": cfg.seed, "config_hash": config_hash(conf)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def on_epoch(epoch, params, opt):
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            ckpt.save_checkpoint(f"{out}.epoch{epoch}", "featnet", params,
                                 {**meta, "epoch": epoch}, opt=opt)

    params, log = tr.train_classifier(tasks, cfg, featnet_config(conf),
                                      on_epoch=on_epoch)
    ckpt.save_checkpoint(out, "featnet", params,
                         {**meta, "epoch": cfg.epochs})
    if args.log:
        with open(args.log, "w") as fh:
            fh.write("epoch,task,mean_loss,accuracy\n")
            for row in log:
                fh.write(f"{row.epoch},{row.task},{row.mean_loss:.6f},"
                         f"{row.accuracy:.4f}\n")
    for row in log[-len(tasks):]:
        print(f"epoch {row.epoch} task {row.task}: loss {row.mean_loss:.4f} "
              f"accuracy {row.accuracy:.3f}")
    print(f"wrote featnet checkpoint {out}")
    return 0


def _denoise_pairs(manifest: Manifest, manifest_path) -> list[tr.DenoisePair]:
    clean_by_id = {r.id: r for r in manifest.by_role("clean")}
    pairs = []
    for rec in manifest.by_role("noisy"):
        clean_id, _, _ = split_pair_id(rec.pair)
        if clean_id not in clean_by_id:
            raise DataError(f"noisy record {rec.id!r} references missing clean "
                            f"record {clean_id!r}")
        pairs.append(tr.DenoisePair(
            id=rec.id,
            noisy=str(_resolve(manifest_path, rec.source)),
            clean=str(_resolve(manifest_path, clean_by_id[clean_id].source))))
    if not pairs:
        raise DataError("manifest contains no noisy/clean pairs")
    return pairs


def cmd_train(args) -> int:
    conf = parse_config(args.config)
    cfg = train_config(conf, args)
    manifest = _load_manifest(args.manifest)
    pairs = _denoise_pairs(manifest, args.manifest)

    featnet_params = None
    if cfg.loss_kind == "feature":
        if not args.featnet:
            raise UsageError("loss_kind=feature requires --featnet checkpoint")
        featnet_params = ckpt.load_checkpoint(args.featnet, "featnet").params

    params = opt = weights = None
    start_epoch = 1
    if args.resume:
        loaded = ckpt.load_checkpoint(args.resume, "denoiser")
        params = loaded.params
        weights = loaded.weights
        start_epoch = int(loaded.meta.get("epoch", 0)) + 1
        opt = ng.Adam(params.trainable(), lr=cfg.learning_rate,
                      names=[n for n, _ in params.named_parameters()])
        if loaded.adam is not None:
            loaded.adam.restore_into(opt)
        print(f"resuming at epoch {start_epoch}")

    meta = {"seed": cfg.seed, "config_hash": config_hash(conf)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def on_epoch(epoch, params, opt, weights):
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 \
                and epoch != cfg.epochs:
            ckpt.save_checkpoint(f"{out}.epoch{epoch}", "denoiser", params,
                                 {**meta, "epoch": epoch}, weights=weights,
                                 opt=opt)

    result = tr.train_denoiser(
        pairs, cfg, featnet_params=featnet_params,
        net_config=denoiser_config(conf), params=params, opt=opt,
        weights=weights, start_epoch=start_epoch,
        log_path=args.log, on_epoch=on_epoch)
    ckpt.save_checkpoint(out, "denoiser", result.params,
                         {**meta, "epoch": cfg.epochs},
                         weights=result.weights)
    for event in result.events:
        print(event)
    if result.rows:
        print(f"final loss {result.rows[-1].loss:.6f} after "
              f"{result.rows[-1].epoch} epochs")
    print(f"wrote denoiser checkpoint {out}")
    return 0


def cmd_denoise(args) -> int:
    loaded = ckpt.load_checkpoint(args.checkpoint, "denoiser")
    params = loaded.params
    inputs: list[Path] = []
    for item in args.inputs:
        p = Path(item)
        if p.suffix == ".csv":
            manifest = _load_manifest(p)
            inputs += [_resolve(p, r.source) for r in manifest.by_role("noisy")]
        else:
            inputs.append(p)
    if not inputs:
        raise UsageError("no input files")
    missing = [str(p) for p in inputs if not p.exists()]
    if missing:
        raise DataError(f"missing input files: {missing}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    threads = int(os.environ.get("SDFL_THREADS", "1"))

    def process(path: Path) -> tuple[str, int]:
        wav = read_wav(path)
        y = dn.denoiser_forward(wav.samples, params, mode="infer")
        est = y.data[:, 0].astype(np.float32)
        write_wav(out / path.name, Waveform(est))
        return str(path), len(wav)

    t0 = time.perf_counter()
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(process, inputs))
    else:
        done = [process(p) for p in inputs]
    wall = time.perf_counter() - t0
    total_s = sum(n for _, n in done) / 16_000
    rtf = wall / total_s if total_s else float("inf")
    print(f"denoised {len(done)} file(s), {total_s:.2f} s of audio in "
          f"{wall:.2f} s ({rtf:.3f} x realtime)")
    return 0


def _read_score_csv(path) -> dict[str, float]:
    import csv as _csv
    scores = {}
    with open(path, newline="") as fh:
        for row in _csv.DictReader(fh):
            scores[row["id"]] = float(row["score"])
    return scores


def cmd_evaluate(args) -> int:
    manifest = _load_manifest(args.manifest)
    noisy = manifest.by_role("noisy")
    if not noisy:
        raise DataError("manifest contains no noisy records")
    clean_by_id = {r.id: r for r in manifest.by_role("clean")}
    files = []
    for rec in noisy:
        try:
            clean_id, _, _ = split_pair_id(rec.pair)
            clean_rec = clean_by_id[clean_id]
        except (ValueError, KeyError) as exc:
            raise DataError(f"noisy record {rec.id!r} has no resolvable clean "
                            f"reference ({exc})") from exc
        files.append({
            "id": rec.id,
            "clean": read_wav(_resolve(args.manifest, clean_rec.source)).samples,
            "noisy": read_wav(_resolve(args.manifest, rec.source)).samples,
        })

    systems: dict[str, dict[str, np.ndarray]] = {}
    for item in args.system or []:
        if "=" not in item:
            raise UsageError(f"--system expects NAME=DIR, got {item!r}")
        name, _, directory = item.partition("=")
        outputs = {}
        missing = []
        for rec in noisy:
            path = Path(directory) / Path(rec.source).name
            if not path.exists():
                missing.append(str(path))
                continue
            outputs[rec.id] = read_wav(path).samples
        if missing:
            raise DataError(f"system {name!r} is missing outputs: {missing}")
        systems[name] = outputs

    external = _read_score_csv(args.score_csv) if args.score_csv else None
    try:
        report = ev.evaluate_corpus(files, systems, external_scores=external,
                                    n_tranches=args.tranches)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text("\n".join(ev.report_csv_lines(report)) + "\n")
    text = ev.report_text(report)
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    ok, lines = verify.run_all(trials=args.trials)
    print("\n".join(lines))
    print("all checks passed" if ok else "VERIFICATION FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdfl",
        description="raw-waveform speech denoiser with a classifier-feature "
                    "training loss")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic desk-scale corpus")
    p.add_argument("--spec", help="key=value synth spec file")
    p.add_argument("--n-speech", type=int, default=4)
    p.add_argument("--n-noise", type=int, default=2)
    p.add_argument("--duration", type=float, default=2.1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mix", help="cross clean and noise dirs into mixtures")
    p.add_argument("--clean", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--snrs", default="0,5,10,15",
                   help="comma-separated target SNRs in dB")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("pretrain", help="train the classifier/loss network")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.set_defaults(func=cmd_pretrain, loss_kind=None)

    p = sub.add_parser("train", help="train the denoiser")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--featnet", help="loss-network checkpoint (feature loss)")
    p.add_argument("--resume", help="denoiser checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--loss", dest="loss_kind", choices=tr.LOSS_KINDS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="run the denoiser over files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+",
                   help="wav files or a manifest .csv of noisy records")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("evaluate", help="score systems against clean references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--system", action="append",
                   help="NAME=DIR of denoised outputs (repeatable)")
    p.add_argument("--tranches", type=int, default=8)
    p.add_argument("--score-csv", dest="score_csv",
                   help="external per-file difficulty scores (id,score)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="run the numerical verification suite")
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ckpt.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, AudioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
