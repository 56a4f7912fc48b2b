"""Command-line front end: ``gen``, ``train``, ``eval``, ``infer`` and ``gradcheck``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
a runtime contract is violated. Log lines carrying wall-clock time start
with ``#`` so that everything else in the output is reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import assignloss as al
from . import evalkit
from . import numcore as nc
from . import synthvid as sv
from . import training
from .config import ConfigError, RunConfig, load_config
from .numcore import ContractError, DimensionError
from .tracker import Model

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT = 0, 1, 2


def _stamp(out) -> None:
    print(f"# {time.strftime('%Y-%m-%dT%H:%M:%S')}", file=out)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "ablate", None):
        cfg = cfg.with_ablations(args.ablate)
    return cfg


# ----------------------------------------------------------------- commands


def cmd_gen(args, out) -> int:
    cfg = _config(args)
    clips = training.make_clips(cfg)
    training.write_dataset(args.out, clips, cfg)
    print(f"wrote {len(clips)} clips to {args.out}", file=out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    if args.resume:
        trainer = training.Trainer.load(args.resume)
        if args.config is not None or args.ablate or args.seed is not None:
            raise ConfigError("--resume takes its configuration from the checkpoint")
        cfg = trainer.cfg
        if args.iterations is not None:
            cfg = cfg.replace(iterations=args.iterations)
            trainer.model.cfg = cfg
    else:
        cfg = _config(args)
        if args.iterations is not None:
            cfg = cfg.replace(iterations=args.iterations)
        trainer = training.Trainer.create(cfg)
    clips = training.read_dataset(args.data)
    _stamp(out)
    print(f"params={trainer.model.num_parameters()} clips={len(clips)} start={trainer.step} until={cfg.iterations}", file=out)

    def log(step: int, r: al.StepResult) -> None:
        if step % cfg.log_every == 0 or step == cfg.iterations:
            sup = "".join("1" if s else "0" for s in r.supervised)
            print(
                f"step={step} loss={r.loss:.6f} cls={r.terms['cls']:.6f} ce={r.terms['ce']:.6f} "
                f"dice={r.terms['dice']:.6f} grad_norm={r.grad_norm:.6f} sup={sup}",
                file=out,
            )

    trainer.run(clips, cfg.iterations, log)
    trainer.save(args.out)
    _stamp(out)
    print(f"saved {args.out} at step {trainer.step}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    model = training.load_model(args.checkpoint)
    clips = training.read_dataset(args.data)
    summary, reports = training.evaluate(model, clips)
    doc = {"summary": summary, "clips": [r.to_dict() for r in reports]}
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    out.write(text)
    return EXIT_OK


def track_color(track_id: int) -> np.ndarray:
    """Fixed colour per track id (golden-angle hue walk)."""
    hue = (track_id * 0.618033988749895) % 1.0
    k = (np.array([5.0, 3.0, 1.0]) + hue * 6.0) % 6.0
    return 1.0 - 0.8 * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def overlay(frame: np.ndarray, masks: np.ndarray, track_ids: np.ndarray, patch: int) -> np.ndarray:
    img = frame.copy()
    for q in np.argsort(track_ids, kind="stable"):
        tid = int(track_ids[q])
        if tid < 0 or not masks[q].any():
            continue
        up = np.kron(masks[q], np.ones((patch, patch), dtype=bool))
        img[:, up] = 0.5 * img[:, up] + 0.5 * track_color(tid)[:, None]
    return img


def cmd_infer(args, out) -> int:
    model = training.load_model(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .tracker import birth_tracks, init_state, step

    frames_doc = []
    state = None
    with nc.no_grad():
        state = init_state(model)
        for t, frame in enumerate(sv.iter_frames(args.clip)):
            pred, state = step(state, frame, model)
            birth_tracks(state, pred)
            masks = pred.masks
            sv.write_ppm(out_dir / f"overlay_{t:03d}.ppm", overlay(frame, masks, state.track_ids, model.cfg.patch))
            probs = pred.class_probs
            frames_doc.append(
                {
                    "frame": t,
                    "queries": [
                        {
                            "query": q,
                            "track_id": int(state.track_ids[q]),
                            "class_probs": [round(float(p), 12) for p in probs[q]],
                            "mask": sv.rle_encode(masks[q]),
                        }
                        for q in range(masks.shape[0])
                    ],
                }
            )
    if not frames_doc:
        raise ContractError(f"{args.clip}: no frames")
    (out_dir / "predictions.json").write_text(json.dumps({"frames": frames_doc}, sort_keys=True) + "\n")
    print(f"wrote {len(frames_doc)} overlays and predictions.json to {out_dir}", file=out)
    return EXIT_OK


def predictions_from_json(doc: dict) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Inverse of the ``infer`` predictions document: per-frame mask stacks and class probabilities."""
    masks, probs = [], []
    for frame in doc["frames"]:
        qs = sorted(frame["queries"], key=lambda d: d["query"])
        masks.append(np.stack([sv.rle_decode(d["mask"]) for d in qs]))
        probs.append(np.array([d["class_probs"] for d in qs]))
    return masks, probs


# ---------------------------------------------------------------- gradcheck

GRADCHECK_GROUPS = (
    ("stem", ("segmenter.stem_",)),
    ("encoder", ("segmenter.encoder", "segmenter.pixel")),
    ("aligner", ("aligner.",)),
    ("decoder", ("segmenter.decoder", "segmenter.query_pos")),
    ("heads", ("segmenter.class_head", "segmenter.mask_head", "segmenter.box_mlp")),
)


def gradcheck_model(
    cfg: RunConfig, coords: int = 3, corrupt: float = 1.0, tol: float = 1e-4, floor: float | None = None
) -> dict[str, nc.GradCheckReport]:
    """Full-pipeline gradient check on a two-frame clip with all discrete choices frozen."""
    cfg = cfg.replace(clip_length=2)
    model = Model.create(cfg)
    frames, gt = training.make_clips(cfg, count=1)[0]
    sup = np.ones(len(frames), dtype=bool)
    trace = nc.DecisionTrace()
    al.clip_objective(model, frames, gt, sup, trace)
    trace.replay()

    def f():
        trace.rewind()
        return al.clip_objective(model, frames, gt, sup, trace)[0]

    params = model.named_parameters()
    reports = {}
    for group, prefixes in GRADCHECK_GROUPS:
        chosen = {k: p for k, p in params.items() if k.startswith(prefixes)}
        if chosen:
            reports[group] = nc.grad_check(
                f, chosen, tol=tol, max_coords=coords, seed=cfg.seed, floor=floor, analytic_scale=corrupt
            )
    return reports


def cmd_gradcheck(args, out) -> int:
    cfg = _config(args)
    reports = gradcheck_model(cfg, coords=args.coords, corrupt=args.corrupt_gradient)
    print(f"{'module':<10} {'tensors':>7} {'max_rel_error':>14}  status", file=out)
    ok = True
    for group, rep in reports.items():
        status = "ok" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{group:<10} {len(rep.errors):>7} {rep.max_error:>14.3e}  {status}", file=out)
    print("gradcheck passed" if ok else "gradcheck FAILED", file=out)
    return EXIT_OK if ok else EXIT_CONTRACT


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="propvis", description="Online query-propagation video segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, ablate=True):
        p.add_argument("--config", help="flat key = value configuration file")
        if seed:
            p.add_argument("--seed", type=int)
        if ablate:
            p.add_argument(
                "--ablate",
                action="append",
                default=[],
                choices=["no-aligner", "no-trajectory", "dynamic-local-pe", "no-reduced-supervision"],
            )

    p = sub.add_parser("gen", help="write a synthetic dataset")
    common(p, ablate=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train and write a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, help="override the configured step count")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="overlays and predictions for one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    common(p)
    p.add_argument("--coords", type=int, default=3, help="coordinates probed per tensor")
    p.add_argument("--corrupt-gradient", type=float, default=1.0, metavar="SCALE", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args, out)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, DimensionError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
