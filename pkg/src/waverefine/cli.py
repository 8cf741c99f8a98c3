"""Command-line entry point binding all modules into reproducible runs.

Exit codes: 0 success, 2 validation error, 1 runtime error.  Outputs are
written atomically (temp file + rename) and every subcommand logs its fully
resolved configuration.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import torch

from . import data, diffusion, dsp, evaluation, training
from .config import ConfigError, RunConfig
from .dsp import Waveform
from .network import DenoiserModel

log = logging.getLogger("waverefine")


class ValidationError(ValueError):
    pass


def _atomic_write_text(path, text: str):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _setup_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, torch.get_num_threads()))


def _model_from_checkpoint(path) -> DenoiserModel:
    config_text, _arrays = training.read_checkpoint(path)
    run_cfg = RunConfig.from_text(config_text) if config_text.strip() else RunConfig()
    model = DenoiserModel(run_cfg.model_config())
    training.load_checkpoint(path, model)
    model.eval()
    return model


def cmd_make_toy_data(args) -> int:
    if args.n < 1:
        raise ValidationError(f"need n >= 1 utterances, got {args.n}")
    manifest = data.make_toy_dataset(args.n, args.out, args.seed)
    print(f"wrote {args.n} utterances; manifest at {manifest}")
    return 0


def cmd_degrade(args) -> int:
    x = dsp.read_wav(args.input)
    if args.replay:
        with open(args.replay) as fh:
            spec = dsp.DegradationSpec.from_text(fh.read())
        out = dsp.apply_degradation(x, spec)
    else:
        rng = np.random.default_rng(args.seed)
        out, spec = dsp.degrade(x, rng)
    tmp = args.output + ".tmp"
    dsp.write_wav(tmp, out)
    os.replace(tmp, args.output)
    if args.spec_out:
        _atomic_write_text(args.spec_out, spec.to_text())
    print(f"degraded {len(x)} samples with methods {','.join(spec.methods)}")
    return 0


def cmd_train(args) -> int:
    run_cfg = RunConfig.from_file(args.config)
    model_cfg = run_cfg.model_config()
    train_cfg = run_cfg.train_config()
    if train_cfg.crop_min % model_cfg.stride_product or \
            train_cfg.crop_max % model_cfg.stride_product:
        raise ValidationError(
            f"stride product {model_cfg.stride_product} does not divide crop bounds "
            f"[{train_cfg.crop_min}, {train_cfg.crop_max}]")
    os.makedirs(args.out, exist_ok=True)
    resolved = run_cfg.to_text()
    _atomic_write_text(os.path.join(args.out, "resolved_config.txt"), resolved)
    print(resolved, end="")

    _setup_determinism(train_cfg.seed)
    model = DenoiserModel(model_cfg)
    resume = args.resume if args.resume else None
    result = training.train(model, train_cfg, args.data, args.out,
                            config_text=resolved, resume_from=resume)
    print(f"finished {train_cfg.total_steps} steps; checkpoint at {result.checkpoint_path}")
    return 0


def cmd_synth(args) -> int:
    _setup_determinism(args.seed)
    model = _model_from_checkpoint(args.checkpoint)
    cond = data.read_condition_file(args.condition)
    reference = dsp.read_wav(args.reference)

    grid = model.config.stride_product
    grid = 256 * grid // np.gcd(256, grid)
    length = (min(len(reference), cond.n_frames * dsp.HOP) // grid) * grid
    if length < grid:
        raise ValidationError(
            f"reference/condition cover only {min(len(reference), cond.n_frames * dsp.HOP)} "
            f"samples; need at least {grid}")
    if length != len(reference):
        log.info("trimmed reference from %d to %d samples (multiple of %d)",
                 len(reference), length, grid)
    ref = torch.from_numpy(reference.samples[:length]).float()
    cond = cond.crop(0, length // dsp.HOP)

    schedule = diffusion.schedule_for_steps(args.steps)
    rng = np.random.default_rng(args.seed)
    out = diffusion.sample(model, cond, ref, schedule, rng)
    tmp = args.out + ".tmp"
    dsp.write_wav(tmp, Waveform(samples=out.numpy().astype(np.float64)))
    os.replace(tmp, args.out)
    print(f"wrote {length} samples to {args.out}")
    return 0


def cmd_eval(args) -> int:
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    for m in metrics:
        if m not in evaluation.SUPPORTED_METRICS:
            raise ValidationError(
                f"unknown metric {m!r}; supported: {', '.join(evaluation.SUPPORTED_METRICS)}")
    _setup_determinism(args.seed)
    model = _model_from_checkpoint(args.checkpoint)

    sections = []
    json_payload = []
    if args.step_ablation:
        steps = [int(s) for s in args.step_ablation.split(",")]
        reports = evaluation.step_ablation(
            model, args.data, steps, metrics=metrics, seed=args.seed,
            max_utterances=args.max_utterances)
        for n, rep in reports.items():
            sections.append(f"== denoising_steps {n} ==\n" + rep.to_text())
            json_payload.append(rep.to_json())
    else:
        schedule = diffusion.schedule_for_steps(args.steps)
        rep = evaluation.evaluate_checkpoint(
            model, args.data, metrics, schedule, seed=args.seed,
            max_utterances=args.max_utterances)
        sections.append(rep.to_text())
        json_payload.append(rep.to_json())

    report_text = "\n".join(sections)
    _atomic_write_text(args.out_report, report_text)
    _atomic_write_text(args.out_report + ".json",
                       "[\n" + ",\n".join(json_payload) + "\n]\n")
    print(report_text, end="")
    return 0


def cmd_inspect_schedule(args) -> int:
    if args.kind == "linear":
        schedule = diffusion.make_linear_schedule(args.steps)
    elif args.kind == "short":
        schedule = diffusion.make_short_schedule()
    else:
        raise ValidationError(f"unknown schedule kind {args.kind!r}")
    print("t\tbeta\talpha\talpha_bar")
    for t in range(1, schedule.T + 1):
        print(f"{t}\t{schedule.beta(t):.8e}\t{schedule.alpha(t):.8e}"
              f"\t{schedule.alpha_bar(t):.8e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="waverefine",
        description="Reference-guided diffusion engine for conditional waveform synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", help="generate the synthetic toy corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("degrade", help="degrade a WAV file with a replayable spec")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec-out", default=None)
    p.add_argument("--replay", default=None,
                   help="replay an existing degradation spec instead of sampling")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train from a config file and dataset manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize audio from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--steps", type=int, default=24)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="run metrics / ablation harnesses on held-out data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="snr,lsd,stoi")
    p.add_argument("--steps", type=int, default=24)
    p.add_argument("--step-ablation", default=None,
                   help="comma-separated step counts, e.g. 4,24,100")
    p.add_argument("--max-utterances", type=int, default=8)
    p.add_argument("--out-report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-schedule", help="print a noise schedule table")
    p.add_argument("--kind", choices=("linear", "short"), required=True)
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(func=cmd_inspect_schedule)

    return parser


VALIDATION_ERRORS = (ValidationError, ConfigError, dsp.DspError,
                     data.DatasetError, evaluation.MetricError)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failure boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
