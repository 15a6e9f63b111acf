"""Command-line interface.

Exit codes: 0 ok, 2 usage, 3 configuration / invalid input, 4 numeric
failure, 5 file I/O or format failure.
"""
from __future__ import annotations

import argparse
import json
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .audiofe import STFT_16K, STFT_44K, MelSpectrogram, ToyLatentCodec
from .config import (ConfigError, SampleConfig, config_hash, load_config_file,
                     resolve_configs, to_dict)
from .flow import NumericError
from .metrics import (OnsetSeries, detect_envelope_onsets, detect_onsets, frechet_distance,
                      inception_score, lag_metric, onset_scores, paired_kl)
from .network import count_params
from .sampling import sample_latents
from .synthdata import build_manifest, collate, read_manifest, render_sample, scene_from_seed, \
    write_manifest
from .tensorio import checkpoint_manifest, read_tensor, write_tensor
from .trainer import Trainer, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _emit(args, summary: str, config: dict, results: dict, seed=None) -> None:
    report = {
        "command": args.command,
        "version": version_string(),
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "results": results,
    }
    print(summary)
    text = json.dumps(report, sort_keys=True, default=float)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _gather_config(args, keys: dict) -> dict:
    """Config-file values overlaid with explicitly given flags."""
    values = dict(load_config_file(args.config)) if getattr(args, "config", None) else {}
    for flag, key in keys.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    values.setdefault("preset", "tiny")
    return values


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> None:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if not 0.0 <= args.audio_text_fraction <= 1.0:
        raise UsageError("--audio-text-fraction must lie in [0, 1]")
    if not 1.0 <= args.duration <= 60.0:
        raise UsageError("--duration must lie in [1, 60]")
    recs = build_manifest(args.n, args.seed, args.duration,
                          audio_text_fraction=args.audio_text_fraction)
    write_manifest(recs, args.out)
    cfg = {"n": args.n, "seed": args.seed, "duration": args.duration,
           "audio_text_fraction": args.audio_text_fraction}
    n_av = sum(r.has_video for r in recs)
    _emit(args, f"wrote {len(recs)} records ({n_av} with video) to {args.out}", cfg,
          {"records": len(recs), "with_video": n_av}, seed=args.seed)


def cmd_train(args) -> None:
    values = _gather_config(args, {
        "preset": "preset", "steps": "train.total_steps", "batch_size": "train.batch_size",
        "lr": "train.base_lr", "warmup": "train.warmup_steps", "seed": "train.seed",
    })
    if args.max_steps is not None and args.max_steps < 0:
        raise UsageError("--max-steps must be >= 0")
    model_cfg, train_cfg, _ = resolve_configs(values)
    records = read_manifest(args.manifest)
    if args.resume:
        tr = Trainer.resume(args.resume, records, log_path=args.log)
    else:
        tr = Trainer(model_cfg, train_cfg, records, use_sync=not args.no_sync, log_path=args.log)
    hist = tr.run(args.max_steps)
    tr.save(args.out)
    cfg = {"model": to_dict(tr.model_cfg), "train": to_dict(tr.cfg), "use_sync": tr.use_sync}
    last = hist[-1]["loss"] if hist else None
    _emit(args, f"trained to step {tr.step}; last loss {last}; checkpoint {args.out}", cfg,
          {"step": tr.step, "final_loss": last}, seed=tr.cfg.seed)


def _override(path, expect_shape, what, dtype):
    arr, _ = read_tensor(path)
    if arr.ndim == 2:
        arr = arr[None]
    if tuple(arr.shape[1:]) != tuple(expect_shape):
        raise ConfigError(f"{what} file has shape {arr.shape[1:]}, expected {tuple(expect_shape)}")
    return torch.from_numpy(arr).to(dtype)


def cmd_sample(args) -> None:
    if not 1.0 <= args.duration <= 60.0:
        raise UsageError("--duration must lie in [1, 60]")
    scfg = SampleConfig(n_steps=args.steps, cfg_strength=args.cfg, duration_sec=args.duration,
                        seed=args.seed)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model(use_ema=not args.raw_weights)
    mcfg = ckpt["model_config"]
    scene = scene_from_seed(args.scene, duration=args.duration)
    s = render_sample(scene, mcfg)
    _, cond = collate([s])
    if args.visual:
        cond = replace(cond, visual=_override(args.visual, cond.visual.shape[1:], "visual",
                                              cond.visual.dtype))
    if args.sync:
        cond = replace(cond, sync=_override(args.sync, cond.sync.shape[1:], "sync",
                                            cond.sync.dtype))
    if args.text:
        cond = replace(cond, text=_override(args.text, cond.text.shape[1:], "text",
                                            cond.text.dtype))
    cond = cond.with_flags(video=not args.no_video, text=not args.no_text)
    audio_len = mcfg.audio_len(args.duration)
    z = sample_latents(model, cond, audio_len, scfg.n_steps, scfg.cfg_strength, scfg.seed)
    latent = z[0].float().numpy()
    write_tensor(args.out, latent, fps=mcfg.latent_fps, kind="latent", scene=args.scene)
    results = {"out": str(args.out), "shape": list(latent.shape)}
    if args.mel_out:
        stft = STFT_16K if abs(mcfg.latent_fps - STFT_16K.latent_fps) < 0.5 else STFT_44K
        codec = ToyLatentCodec(stft.n_mels, mcfg.latent_dim)
        mel = codec.decode(latent)
        write_tensor(args.mel_out, mel, fps=stft.frame_rate, kind="mel",
                     sample_rate=stft.sample_rate)
        results["mel_out"] = str(args.mel_out)
    cfg = {"sample": to_dict(scfg), "model": to_dict(mcfg), "checkpoint": str(args.checkpoint),
           "scene": args.scene, "with_video": not args.no_video, "with_text": not args.no_text}
    _emit(args, f"wrote latent {latent.shape} to {args.out}", cfg, results, seed=args.seed)


def cmd_eval_fd(args) -> None:
    a, _ = read_tensor(args.a)
    b, _ = read_tensor(args.b)
    fd = frechet_distance(a, b)
    _emit(args, f"{fd}", {"a": str(args.a), "b": str(args.b)}, {"fd": fd})


def cmd_eval_is(args) -> None:
    logits, _ = read_tensor(args.logits)
    score = inception_score(logits)
    _emit(args, f"{score}", {"logits": str(args.logits)}, {"is": score})


def cmd_eval_kl(args) -> None:
    gt, _ = read_tensor(args.gt)
    gen, _ = read_tensor(args.gen)
    kl = paired_kl(gt, gen, args.direction)
    _emit(args, f"{kl}", {"gt": str(args.gt), "gen": str(args.gen), "direction": args.direction},
          {"kl": kl})


def _onsets_from_file(path) -> tuple[OnsetSeries, np.ndarray, float]:
    arr, header = read_tensor(path)
    fps = header.get("fps")
    if fps is None:
        raise ConfigError(f"{path}: header carries no fps")
    if header.get("kind") == "mel":
        sr = header.get("sample_rate", STFT_16K.sample_rate)
        params = STFT_16K if sr == STFT_16K.sample_rate else STFT_44K
        return detect_onsets(MelSpectrogram(arr.astype(np.float64), params)), arr, fps
    env = arr[:, 0] if arr.ndim == 2 else arr
    return detect_envelope_onsets(env, fps), env, fps


def cmd_eval_onset(args) -> None:
    if args.tol <= 0:
        raise UsageError("--tol must be positive")
    if (args.events is None) == (args.scene is None):
        raise UsageError("give exactly one of --events or --scene")
    pred, _, _ = _onsets_from_file(args.pred)
    if args.scene is not None:
        sc = scene_from_seed(args.scene, duration=args.duration)
        gt = OnsetSeries(sc.event_times, sc.duration_sec)
    else:
        times = [float(x) for x in args.events.split(",") if x.strip()]
        gt = OnsetSeries(times, max([pred.duration, *times]) + 1e-9)
    acc, ap, f1 = onset_scores(pred, gt, args.tol)
    res = {"accuracy": acc, "ap": ap, "f1": f1, "pred_onsets": pred.times.tolist()}
    _emit(args, f"accuracy {acc:.4f}  AP {ap:.4f}  F1 {f1:.4f}",
          {"pred": str(args.pred), "tol": args.tol, "scene": args.scene, "events": args.events},
          res)


def cmd_eval_lag(args) -> None:
    ga, ha = read_tensor(args.gen)
    gb, hb = read_tensor(args.gt)
    fps = args.fps or ha.get("fps") or hb.get("fps")
    if not fps:
        raise ConfigError("no frame rate: pass --fps or use files with an fps header")
    ga = ga[:, 0] if ga.ndim == 2 else ga
    gb = gb[:, 0] if gb.ndim == 2 else gb
    lag = lag_metric(ga, gb, fps)
    _emit(args, f"{lag}", {"gen": str(args.gen), "gt": str(args.gt), "fps": fps},
          {"lag_sec": lag, "lag_frames": lag * fps})


def cmd_inspect(args) -> None:
    man = checkpoint_manifest(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    total = 0
    for e in man["tensors"]:
        if e["name"].startswith("model/"):
            total += int(np.prod(e["shape"], dtype=np.int64))
        if args.verbose or e["name"].startswith("model/"):
            print(f"{e['name']}\t{tuple(e['shape'])}")
    expected = count_params(ckpt["model_config"], use_sync=ckpt["use_sync"])
    cfg = {"model": to_dict(ckpt["model_config"]), "use_sync": ckpt["use_sync"]}
    _emit(args, f"step {man['step']}  parameters {total} (config implies {expected})", cfg,
          {"step": man["step"], "n_params": total, "count_params": expected,
           "tensors": [[e["name"], e["shape"]] for e in man["tensors"]]},
          seed=man.get("seed"))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="foleyflow", formatter_class=fmt,
                                description="Flow-matching video-to-audio toolkit on synthetic scenes.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_, formatter_class=fmt)
        sp.set_defaults(fn=fn)
        sp.add_argument("--report", default=None, help="write the JSON report here instead of stdout")
        sp.add_argument("--threads", type=int, default=1, help="intra-op CPU threads")
        return sp

    sp = command("gen-data", cmd_gen_data, "write a synthetic dataset manifest")
    sp.add_argument("--n", type=int, default=2000, help="number of scenes")
    sp.add_argument("--seed", type=int, default=0, help="dataset seed")
    sp.add_argument("--duration", type=float, default=8.0, help="clip length in seconds")
    sp.add_argument("--audio-text-fraction", type=float, default=0.0,
                    help="fraction of records without video")
    sp.add_argument("--out", required=True, help="manifest path (JSON lines)")

    sp = command("train", cmd_train, "train a model on a manifest")
    sp.add_argument("--manifest", required=True, help="dataset manifest")
    sp.add_argument("--out", required=True, help="checkpoint to write")
    sp.add_argument("--config", default=None, help="key = value config file")
    sp.add_argument("--preset", default=None, help="model preset (default tiny)")
    sp.add_argument("--steps", type=int, default=None, help="total optimisation steps")
    sp.add_argument("--max-steps", type=int, default=None,
                    help="stop after this many steps in this invocation")
    sp.add_argument("--batch-size", type=int, default=None, help="batch size")
    sp.add_argument("--lr", type=float, default=None, help="base learning rate")
    sp.add_argument("--warmup", type=int, default=None, help="warmup steps")
    sp.add_argument("--seed", type=int, default=None, help="training seed")
    sp.add_argument("--no-sync", action="store_true", help="ablate the synchronisation module")
    sp.add_argument("--resume", default=None, help="continue from this checkpoint")
    sp.add_argument("--log", default=None, help="append JSON-lines training log here")

    sp = command("sample", cmd_sample, "generate a latent for a synthetic scene")
    sp.add_argument("--checkpoint", required=True, help="trained checkpoint")
    sp.add_argument("--out", required=True, help="latent tensor file to write")
    sp.add_argument("--mel-out", default=None, help="also write a decoded mel tensor")
    sp.add_argument("--duration", type=float, default=8.0, help="seconds, in [1, 60]")
    sp.add_argument("--steps", type=int, default=25, help="Euler steps")
    sp.add_argument("--cfg", type=float, default=4.5, help="guidance strength")
    sp.add_argument("--seed", type=int, default=0, help="noise seed")
    sp.add_argument("--scene", type=int, default=0, help="seed of the synthetic scene to condition on")
    sp.add_argument("--visual", default=None, help="override visual features (tensor file)")
    sp.add_argument("--sync", default=None, help="override sync features (tensor file)")
    sp.add_argument("--text", default=None, help="override text features (tensor file)")
    sp.add_argument("--no-video", action="store_true", help="sample without video conditions")
    sp.add_argument("--no-text", action="store_true", help="sample without text conditions")
    sp.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")

    sp = command("eval-fd", cmd_eval_fd, "Frechet distance between two embedding files")
    sp.add_argument("a")
    sp.add_argument("b")

    sp = command("eval-is", cmd_eval_is, "Inception Score of a logit file")
    sp.add_argument("logits")

    sp = command("eval-kl", cmd_eval_kl, "paired KL between two logit files")
    sp.add_argument("gt")
    sp.add_argument("gen")
    sp.add_argument("--direction", choices=["gt||gen", "gen||gt"], default="gt||gen",
                    help="KL direction")

    sp = command("eval-onset", cmd_eval_onset, "onset accuracy / AP / F1 of a latent or mel file")
    sp.add_argument("pred", help="latent (channel 0 is used) or mel tensor file")
    sp.add_argument("--events", default=None, help="comma-separated reference onset times")
    sp.add_argument("--scene", type=int, default=None, help="reference = events of this scene seed")
    sp.add_argument("--duration", type=float, default=8.0, help="scene duration for --scene")
    sp.add_argument("--tol", type=float, default=0.1, help="matching tolerance in seconds")

    sp = command("eval-lag", cmd_eval_lag, "cross-correlation lag between two envelopes")
    sp.add_argument("gen")
    sp.add_argument("gt")
    sp.add_argument("--fps", type=float, default=None, help="frame rate if not in the headers")

    sp = command("inspect", cmd_inspect, "list checkpoint tensors and parameter count")
    sp.add_argument("checkpoint")
    sp.add_argument("--verbose", action="store_true", help="also list EMA and optimizer tensors")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    torch.set_num_threads(args.threads)
    try:
        args.fn(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
