"""Command-line entry point: data generation, labeling, training, prediction,
evaluation, and mode-text round trips.

Exit codes: 0 success, 1 data/runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import synth
from .metrics import evaluate_model
from .model import ModelConfig, ScenePredictionModel
from .model.network import CheckpointError
from .modes import DEFAULT_THETA_HAT, extract_gtsm
from .modetext import IncompleteMode
from .modetext import ParseError as ModeTextError
from .modetext import sm_to_text, text_to_sm
from .sampling import InsufficientModes
from .synth import GenerationFailed, ParseError, ScenarioTemplate, TemplateKind
from .training import TrainConfig, Trainer, TrainingDiverged, label_scenes

RUNTIME_ERRORS = (
    ParseError,
    GenerationFailed,
    CheckpointError,
    TrainingDiverged,
    ModeTextError,
    IncompleteMode,
    InsufficientModes,
    OSError,
    ValueError,
)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    return doc


def _scene_files(data_dir: str) -> list[Path]:
    root = Path(data_dir)
    if not root.exists():
        raise ParseError(f"data directory {data_dir} does not exist")
    return sorted(root.glob("*.json"))


def _seed_everything(seed: int) -> None:
    np.random.seed(seed)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    template = ScenarioTemplate(
        TemplateKind(args.template),
        n_lanes=args.n_lanes,
        agent_range=(args.min_agents, args.max_agents),
    )
    for i in range(args.count):
        scene = synth.gen_scene(template, args.seed + i)
        path = out / f"scene_{args.seed + i:05d}.json"
        synth.write_scene(scene, path, meta={"template": args.template, "seed": args.seed + i})
    print(f"wrote {args.count} scenes to {out}")
    return 0


def cmd_label(args) -> int:
    files = _scene_files(args.data)
    report = {"theta_hat": args.theta_hat, "scenes": []}
    for f in files:
        scene = synth.read_scene(f)
        gtsm, margins = extract_gtsm(scene, args.theta_hat)
        report["scenes"].append(
            {
                "file": f.name,
                "a2l": list(gtsm.a2l),
                "a2a": [int(h) for h in gtsm.a2a],
                "lane_margins": margins.lane.tolist(),
                "homotopy_margins": margins.homotopy.tolist(),
                "text": sm_to_text(gtsm, scene),
            }
        )
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    print(f"labeled {len(files)} scenes", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg_doc = _load_config(args.config)
    scenes = [synth.read_scene(f) for f in _scene_files(args.data)]
    if not scenes:
        raise ParseError(f"no scene files found in {args.data}")

    model_cfg = ModelConfig.from_dict(cfg_doc.get("model", {}))
    train_dict = dict(cfg_doc.get("train", {}))
    if args.steps is not None:
        train_dict["steps"] = args.steps
    if args.seed is not None:
        train_dict["seed"] = args.seed
    train_cfg = TrainConfig.from_dict(train_dict)

    labeled = label_scenes(scenes, model_cfg.theta_hat)
    if args.resume:
        trainer = Trainer.resume(args.resume, labeled)
    else:
        _seed_everything(train_cfg.seed)
        trainer = Trainer(ScenePredictionModel(model_cfg), train_cfg, labeled)
    trainer.run(log_every=args.log_every)
    trainer.save(args.out)
    curve_path = Path(args.out).with_suffix(".losses.json")
    curve_path.write_text(json.dumps(trainer.history, indent=0), encoding="utf-8")
    print(f"trained {trainer.step_count} steps; checkpoint at {args.out}, loss curve at {curve_path}")
    return 0


def cmd_predict(args) -> int:
    model, _ = ScenePredictionModel.load_checkpoint(args.checkpoint)
    scene = synth.read_scene(args.scene)
    override = None
    if args.mode_text:
        override = text_to_sm(Path(args.mode_text).read_text(encoding="utf-8"), scene)
    pred = model.predict(scene, k=args.k, mode_override=override, strategy=args.strategy)
    doc = {
        "samples": [
            {
                "a2l": list(s.a2l),
                "a2a": [int(h) for h in s.a2a],
                "probability": float(pred.probs[i]),
                "energy": float(pred.energies[i]),
                "text": sm_to_text(s, scene),
                "trajectories": pred.poses[i].tolist(),
                "speeds": pred.speeds[i].tolist(),
            }
            for i, s in enumerate(pred.samples)
        ],
        "ml_index": pred.ml_index,
    }
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(pred.samples)} conditioned predictions to {args.out}")
    else:
        print(text)
    return 0


def cmd_eval(args) -> int:
    model, _ = ScenePredictionModel.load_checkpoint(args.checkpoint)
    scenes = [synth.read_scene(f) for f in _scene_files(args.data)]
    if not scenes:
        raise ParseError(f"no scene files found in {args.data}")
    labeled = label_scenes(scenes, model.cfg.theta_hat)
    report = evaluate_model(model, labeled, k=args.k, strategy=args.strategy)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1), encoding="utf-8")
    width = max(len(k) for k in report)
    for key in sorted(report):
        print(f"{key:<{width}}  {report[key]:.4f}")
    return 0


def cmd_modes_text(args) -> int:
    scene = synth.read_scene(args.scene)
    if args.parse:
        sm = text_to_sm(Path(args.parse).read_text(encoding="utf-8"), scene)
        print(json.dumps({"a2l": list(sm.a2l), "a2a": [int(h) for h in sm.a2a]}))
    else:
        gtsm, _ = extract_gtsm(scene, args.theta_hat)
        sys.stdout.write(sm_to_text(gtsm, scene))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenemodes",
        description="Tokenized scene-mode traffic prediction: synthesize, label, train, predict, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scene logs")
    p.add_argument("--template", required=True, choices=[k.value for k in TemplateKind])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-lanes", type=int, default=3)
    p.add_argument("--min-agents", type=int, default=2)
    p.add_argument("--max-agents", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("label", help="extract ground-truth scene modes from logs")
    p.add_argument("--data", required=True)
    p.add_argument("--theta-hat", type=float, default=DEFAULT_THETA_HAT)
    p.add_argument("--out")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train a model on scene logs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="sample modes and decode trajectories for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--mode-text", help="condition on exactly this mode (text file)")
    p.add_argument("--strategy", choices=["one_shot", "autoregressive"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="run the metric suite on scene logs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--strategy", choices=["one_shot", "autoregressive"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("modes-text", help="render or parse scene-mode text")
    p.add_argument("--scene", required=True)
    p.add_argument("--parse", help="text file to parse back into a mode")
    p.add_argument("--theta-hat", type=float, default=DEFAULT_THETA_HAT)
    p.set_defaults(func=cmd_modes_text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
