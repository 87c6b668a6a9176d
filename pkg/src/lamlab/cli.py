"""Command line: gen-data, train, eval, ablate, probe.

Every command resolves its configuration from built-in defaults, then an
optional flat `key = value` config file (--config), then explicit flags, and
writes the fully resolved configuration next to its outputs. Unknown config
keys are rejected. stdout carries machine-readable output paths; diagnostics
go to stderr.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training exploded/aborted,
5 checkpoint/config mismatch, 6 under-populated probe class.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data_io, metrics, model, probes, sampling, training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_EXPLODE = 4
EXIT_CKPT = 5
EXIT_CLASS = 6


class ConfigError(ValueError):
    pass


# option tables: name -> (type, default, help); None default means required
_GEN_KEYS = {
    "seed": (int, 0, "dataset seed"),
    "envs": (int, 4, "number of environments"),
    "traj_per_env": (int, 25, "trajectories per environment"),
    "steps": (int, 50, "frames per trajectory"),
    "height": (int, 32, "frame height"),
    "width": (int, 32, "frame width"),
    "step_max": (float, 0.12, "max per-step displacement norm"),
    "out": (str, "dataset.aclamds", "output dataset path"),
}

_TRAIN_KEYS = {
    "data": (str, None, "input dataset path"),
    "out_dir": (str, "lamlab_out/train", "output directory"),
    "seed": (int, 0, "training seed"),
    "steps": (int, 5000, "optimization steps"),
    "batch_pairs": (int, 64, "pair batch size"),
    "batch_triples": (int, 64, "triple batch size"),
    "base_lr": (float, 3e-4, "peak learning rate"),
    "warmup_steps": (int, 200, "linear warmup steps"),
    "clip_norm": (float, 1.0, "global gradient-norm clip"),
    "lambda_ac": (float, 1.0, "weight of the composition term"),
    "beta_commit": (float, 0.25, "commitment loss weight"),
    "w_codebook": (float, 1.0, "codebook loss weight"),
    "w_proprio": (float, 1.0, "proprio loss weight"),
    "ac_form": (str, "fdm", "fdm | idm-no-sg | idm-sg-zik | idm-sg-sum"),
    "vq_placement": (str, "post", "post | pre"),
    "eval_every": (int, 500, "checkpoint snapshot interval"),
    "horizon": (int, 10, "max sampled index span"),
    "holdout_frac": (float, 0.2, "per-env fraction of trajectories held out"),
    "codebook_size": (int, 32, "codebook rows"),
    "n_tokens": (int, 2, "tokens per latent"),
    "code_dim": (int, 8, "dims per token"),
    "dead_code_steps": (int, 500, "steps before an unused code is reseeded (0 off)"),
}

_EVAL_KEYS = {
    "data": (str, None, "input dataset path"),
    "checkpoint": (str, None, "trained checkpoint path"),
    "out_dir": (str, "lamlab_out/eval", "output directory"),
    "seed": (int, 0, "evaluation seed"),
    "placement": (str, "post", "post | pre"),
    "n_instances": (int, 4096, "sampled instances per metric"),
    "horizon": (int, 10, "max sampled index span"),
    "n_buckets": (int, 8, "magnitude stratification bins"),
    "cycle_m": (int, 3, "frames per cycle"),
    "probe_per_env": (int, 256, "probe samples per environment"),
    "norm_traj_count": (int, 3, "norm-trajectory CSVs to write"),
    "transfer_count": (int, 5, "motion-transfer examples to write"),
    "holdout_frac": (float, 0.2, "per-env held-out fraction evaluated"),
}

_ABLATE_KEYS = {
    "data": (str, None, "input dataset path"),
    "out_dir": (str, "lamlab_out/ablate", "output directory"),
    "seeds": (str, "0,1,2", "comma-separated seeds"),
    "steps": (int, 5000, "training steps per cell"),
    "batch_pairs": (int, 64, "pair batch size"),
    "batch_triples": (int, 64, "triple batch size"),
    "base_lr": (float, 3e-4, "peak learning rate"),
    "warmup_steps": (int, 200, "linear warmup steps"),
    "lambda_ac": (float, 1.0, "AC weight for the non-control designs"),
    "n_instances": (int, 1024, "metric instances per stable cell"),
    "horizon": (int, 10, "max sampled index span"),
    "holdout_frac": (float, 0.2, "per-env held-out fraction"),
}

_PROBE_KEYS = {
    "data": (str, None, "input dataset path"),
    "checkpoint": (str, None, "trained checkpoint path"),
    "out_dir": (str, "lamlab_out/probe", "output directory"),
    "seed": (int, 0, "probe seed"),
    "placement": (str, "post", "post | pre"),
    "probe_per_env": (int, 256, "probe samples per environment"),
    "horizon": (int, 10, "max sampled index span"),
    "holdout_frac": (float, 0.2, "per-env held-out fraction probed"),
    "shuffled_labels": (int, 0, "1 to shuffle labels (chance-level control)"),
}

_COMMAND_KEYS = {
    "gen-data": _GEN_KEYS,
    "train": _TRAIN_KEYS,
    "eval": _EVAL_KEYS,
    "ablate": _ABLATE_KEYS,
    "probe": _PROBE_KEYS,
}

_AC_FORM_CLI = {"fdm": "fdm", "idm-no-sg": "idm_no_sg", "idm-sg-zik": "idm_sg_zik", "idm-sg-sum": "idm_sg_sum"}
_PLACEMENT_CLI = {"post": "post_vq", "pre": "pre_vq"}


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected 'key = value'")
                key, val = (part.strip() for part in line.split("=", 1))
                values[key] = val
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return values


def resolve_config(command: str, file_values: dict[str, str], cli_values: dict) -> dict:
    """defaults < config file < explicit flags; unknown keys are rejected."""
    keys = _COMMAND_KEYS[command]
    resolved = {}
    for name, (typ, default, _help) in keys.items():
        resolved[name] = default
    for key, raw in file_values.items():
        if key not in keys:
            raise ConfigError(f"unknown config key {key!r} for command {command}")
        typ = keys[key][0]
        try:
            resolved[key] = typ(raw)
        except ValueError as e:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from e
    for key, val in cli_values.items():
        if val is not None:
            resolved[key] = val
    missing = [k for k, v in resolved.items() if v is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return resolved


def write_resolved_config(resolved: dict, path: str) -> str:
    lines = [f"{key} = {resolved[key]}" for key in sorted(resolved)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path


def _out_dir_sidecar(out_dir: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_resolved_config(resolved, os.path.join(out_dir, "resolved_config.txt"))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(resolved: dict) -> int:
    if resolved["envs"] < 1:
        raise ConfigError("envs: must be >= 1")
    if resolved["traj_per_env"] < 1:
        raise ConfigError("traj_per_env: must be >= 1")
    if resolved["steps"] < 3:
        raise ConfigError("steps: trajectories need at least 3 frames")
    if resolved["seed"] < 0:
        raise ConfigError("seed: must be >= 0")
    cfg = data_io.DatasetConfig(
        seed=resolved["seed"],
        env_count=resolved["envs"],
        traj_per_env=resolved["traj_per_env"],
        steps=resolved["steps"],
        height=resolved["height"],
        width=resolved["width"],
        step_max=resolved["step_max"],
    )
    path = data_io.gen_dataset(cfg, resolved["out"])
    write_resolved_config(resolved, path + ".config.txt")
    ds = data_io.load_dataset(path)
    print(path)
    print(
        f"envs={ds.header['env_count']} trajectories={ds.header['traj_count']} "
        f"steps={ds.header['steps_per_traj']} frame={ds.header['image_hw'][0]}x{ds.header['image_hw'][1]}",
        file=sys.stderr,
    )
    return EXIT_OK


def _train_config_from(resolved: dict) -> tuple[training.TrainConfig, model.ModelConfig]:
    if resolved["ac_form"] not in _AC_FORM_CLI:
        raise ConfigError(f"ac_form: unknown value {resolved['ac_form']!r}")
    if resolved["vq_placement"] not in _PLACEMENT_CLI:
        raise ConfigError(f"vq_placement: unknown value {resolved['vq_placement']!r}")
    weights = model.LossWeights(
        lambda_ac=resolved["lambda_ac"],
        beta_commit=resolved["beta_commit"],
        w_codebook=resolved["w_codebook"],
        w_proprio=resolved["w_proprio"],
    )
    cfg = training.TrainConfig(
        seed=resolved["seed"],
        steps=resolved["steps"],
        batch_pairs=resolved["batch_pairs"],
        batch_triples=resolved["batch_triples"],
        base_lr=resolved["base_lr"],
        warmup_steps=resolved["warmup_steps"],
        clip_norm=resolved["clip_norm"],
        weights=weights,
        ac_form=_AC_FORM_CLI[resolved["ac_form"]],
        vq_placement=_PLACEMENT_CLI[resolved["vq_placement"]],
        eval_every=resolved["eval_every"],
        horizon=resolved["horizon"],
        holdout_frac=resolved["holdout_frac"],
        dead_code_steps=resolved["dead_code_steps"],
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg, None  # model config finalized once the dataset header is known


def cmd_train(resolved: dict) -> int:
    cfg, _ = _train_config_from(resolved)
    dataset = data_io.load_dataset(resolved["data"])
    h, w = dataset.image_hw
    mcfg = model.ModelConfig(
        height=h,
        width=w,
        codebook_size=resolved["codebook_size"],
        n_tokens=resolved["n_tokens"],
        code_dim=resolved["code_dim"],
    )
    _out_dir_sidecar(resolved["out_dir"], resolved)
    result = training.train(dataset, cfg, resolved["out_dir"], mcfg)
    print(result.checkpoint_path)
    print(result.step_log_path)
    last = result.rows[-1]
    print(
        f"status={result.status} steps={len(result.rows)} loss_total={last.loss_total:.6f} "
        f"loss_rec={last.loss_rec:.6f} loss_vq={last.loss_vq:.6f} loss_ac={last.loss_ac:.6f} "
        f"loss_proprio={last.loss_proprio:.6f}",
        file=sys.stderr,
    )
    return EXIT_OK if result.status == "stable" or result.status == "collapse" else EXIT_EXPLODE


def _load_for_eval(resolved: dict):
    dataset = data_io.load_dataset(resolved["data"])
    params, tcfg = training.load_model(resolved["checkpoint"])
    h, w = dataset.image_hw
    if (params.cfg.height, params.cfg.width) != (h, w):
        raise data_io.CheckpointMismatchError(
            f"checkpoint frames are {params.cfg.height}x{params.cfg.width}, dataset is {h}x{w}"
        )
    return dataset, params, tcfg


def cmd_eval(resolved: dict) -> int:
    if resolved["probe_per_env"] < probes.MIN_PER_CLASS:
        raise ConfigError(f"probe_per_env: must be >= {probes.MIN_PER_CLASS}")
    dataset, params, _tcfg = _load_for_eval(resolved)
    placement = _PLACEMENT_CLI.get(resolved["placement"])
    if placement is None:
        raise ConfigError(f"placement: unknown value {resolved['placement']!r}")
    out_dir = resolved["out_dir"]
    _out_dir_sidecar(out_dir, resolved)

    _, held = dataset.split_ids(resolved["holdout_frac"])
    eval_ds = dataset.subset(held)
    spec = sampling.SampleSpec(horizon=resolved["horizon"], n_buckets=resolved["n_buckets"])
    latent_fn = model.make_latent_fn(params, placement)
    seed = resolved["seed"]
    n = resolved["n_instances"]

    def stream(tag: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, tag])))

    report = metrics.MetricsReport(
        norm_ac=metrics.norm_ac(latent_fn, eval_ds, spec, n, stream(1)),
        pearson_r=metrics.displacement_corr(latent_fn, eval_ds, spec, n, stream(2)),
        norm_identity=metrics.norm_identity(latent_fn, eval_ds, n, stream(3), spec),
        delta_inv=metrics.delta_inv(latent_fn, eval_ds, spec, n, stream(4)),
        cycle_residual=metrics.cycle_residual(latent_fn, eval_ds, resolved["cycle_m"], n, stream(5), spec),
        env_probe_acc=_env_probe_value(latent_fn, eval_ds, resolved["probe_per_env"], spec, stream(6)),
        goal_probe_r2=_goal_probe_value(latent_fn, eval_ds, resolved["probe_per_env"], spec, stream(7)),
        n_instances=n,
        seed=seed,
        placement=placement,
    )
    report_path = metrics.build_report(report, os.path.join(out_dir, "report.json"))
    print(report_path)

    norm_rng = stream(8)
    for idx in range(min(resolved["norm_traj_count"], len(eval_ds.trajectories))):
        nt = metrics.norm_trajectory(latent_fn, eval_ds.trajectories[idx])
        print(metrics.write_norm_trajectory_csv(nt, os.path.join(out_dir, f"norm_traj_{idx}.csv")))

    decoder_fn = model.make_decoder_fn(params)
    rows = []
    for idx in range(resolved["transfer_count"]):
        src_id = int(norm_rng.integers(0, len(eval_ds.trajectories)))
        src = eval_ds.trajectories[src_id]
        triple = sampling.sample_triple(src, spec, norm_rng)
        tgt_id = int(norm_rng.integers(0, len(eval_ds.trajectories)))
        tgt_frame = eval_ds.trajectories[tgt_id].frames[int(norm_rng.integers(0, len(eval_ds.trajectories[tgt_id])))]
        res = metrics.motion_transfer(latent_fn, decoder_fn, src, triple, tgt_frame)
        metrics.write_ppm(res.img_direct, os.path.join(out_dir, f"transfer_{idx}_direct.ppm"))
        metrics.write_ppm(res.img_composed, os.path.join(out_dir, f"transfer_{idx}_composed.ppm"))
        metrics.write_raw_f32(res.img_direct, os.path.join(out_dir, f"transfer_{idx}_direct.f32"))
        metrics.write_raw_f32(res.img_composed, os.path.join(out_dir, f"transfer_{idx}_composed.f32"))
        rows.append((idx, src_id, triple, tgt_id, res.mse_between))
    with open(os.path.join(out_dir, "transfer_summary.csv"), "w") as f:
        f.write("index,src_traj,i,j,k,tgt_traj,mse_between\n")
        for idx, src_id, (i, j, k), tgt_id, m in rows:
            f.write(f"{idx},{src_id},{i},{j},{k},{tgt_id},{m!r}\n")
    print(os.path.join(out_dir, "transfer_summary.csv"))
    return EXIT_OK


def _env_probe_value(latent_fn, ds, per_env, spec, rng) -> metrics.MetricValue:
    pd = probes.build_probe_dataset(latent_fn, ds, per_env, spec, rng)
    return probes.env_probe(pd.latents, pd.env_labels, rng)


def _goal_probe_value(latent_fn, ds, per_env, spec, rng) -> metrics.MetricValue:
    pd = probes.build_probe_dataset(latent_fn, ds, per_env, spec, rng)
    r2, _ridge = probes.goal_probe(pd, rng)
    return r2


ABLATION_DESIGNS = (
    # (name, ac_form, placement, lambda override or None, expected outcome)
    ("fdm-post", "fdm", "post_vq", None, "stable"),
    ("fdm-pre", "fdm", "pre_vq", None, "stable, higher r, higher norm_ac than fdm-post"),
    ("idm-no-sg", "idm_no_sg", "post_vq", None, "collapse"),
    ("idm-sg-zik", "idm_sg_zik", "post_vq", None, "stable"),
    ("idm-sg-sum", "idm_sg_sum", "post_vq", None, "explode"),
    ("no-ac", "fdm", "post_vq", 0.0, "control"),
)


def cmd_ablate(resolved: dict) -> int:
    dataset = data_io.load_dataset(resolved["data"])
    out_dir = resolved["out_dir"]
    _out_dir_sidecar(out_dir, resolved)
    try:
        seeds = [int(s) for s in resolved["seeds"].split(",") if s.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"seeds: {e}") from e
    if not seeds:
        raise ConfigError("seeds: need at least one seed")
    h, w = dataset.image_hw
    spec = sampling.SampleSpec(horizon=resolved["horizon"])

    rows = []
    observed: dict[str, list[str]] = {}
    for design, ac_form, placement, lam, _expected in ABLATION_DESIGNS:
        for seed in seeds:
            weights = model.LossWeights(lambda_ac=resolved["lambda_ac"] if lam is None else lam)
            cfg = training.TrainConfig(
                seed=seed,
                steps=resolved["steps"],
                batch_pairs=resolved["batch_pairs"],
                batch_triples=resolved["batch_triples"],
                base_lr=resolved["base_lr"],
                warmup_steps=resolved["warmup_steps"],
                weights=weights,
                ac_form=ac_form,
                vq_placement=placement,
                eval_every=0,
                horizon=resolved["horizon"],
                holdout_frac=resolved["holdout_frac"],
            )
            cell_dir = os.path.join(out_dir, f"{design}_seed{seed}")
            result = training.train(dataset, cfg, cell_dir, model.ModelConfig(height=h, width=w))
            observed.setdefault(design, []).append(result.status)
            if result.status == "stable":
                _, held = dataset.split_ids(resolved["holdout_frac"])
                eval_ds = dataset.subset(held)
                latent_fn = model.make_latent_fn(result.params, placement)
                n = resolved["n_instances"]
                na = metrics.norm_ac(latent_fn, eval_ds, spec, n, _ablate_stream(seed, 1))
                pr = metrics.displacement_corr(latent_fn, eval_ds, spec, n, _ablate_stream(seed, 2))
            else:
                na, pr = "-", "-"
            rows.append((design, seed, na, pr, result.status))
            print(f"{design} seed={seed} status={result.status} norm_ac={na} pearson_r={pr}", file=sys.stderr)

    table_path = os.path.join(out_dir, "ablation.csv")
    with open(table_path, "w") as f:
        f.write("design,seed,norm_ac,pearson_r,stability\n")
        for design, seed, na, pr, status in rows:
            f.write(f"{design},{seed},{_fmt(na)},{_fmt(pr)},{status}\n")
        for design, *_ in ABLATION_DESIGNS:
            cell = [r for r in rows if r[0] == design]
            stable_cells = [r for r in cell if r[4] == "stable"]
            na_med = _median([r[2] for r in stable_cells])
            pr_med = _median([r[3] for r in stable_cells])
            statuses = [r[4] for r in cell]
            worst = "explode" if "explode" in statuses else ("collapse" if "collapse" in statuses else "stable")
            majority = max(set(statuses), key=lambda s: (statuses.count(s), s == worst))
            f.write(f"{design},median,{_fmt(na_med)},{_fmt(pr_med)},{majority}\n")

    expect_path = os.path.join(out_dir, "ablation_expected.csv")
    with open(expect_path, "w") as f:
        f.write("design,expected,observed\n")
        for design, _af, _pl, _lam, expected in ABLATION_DESIGNS:
            f.write(f"{design},\"{expected}\",{';'.join(observed[design])}\n")

    print(table_path)
    print(expect_path)
    return EXIT_OK


def _ablate_stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 100 + tag])))


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return repr(float(v))


def _median(values) -> float | str:
    nums = [v for v in values if not isinstance(v, str)]
    if not nums:
        return "-"
    return float(np.median(nums))


def cmd_probe(resolved: dict) -> int:
    if resolved["probe_per_env"] < probes.MIN_PER_CLASS:
        raise ConfigError(f"probe_per_env: must be >= {probes.MIN_PER_CLASS}")
    dataset, params, _tcfg = _load_for_eval(resolved)
    placement = _PLACEMENT_CLI.get(resolved["placement"])
    if placement is None:
        raise ConfigError(f"placement: unknown value {resolved['placement']!r}")
    out_dir = resolved["out_dir"]
    _out_dir_sidecar(out_dir, resolved)

    _, held = dataset.split_ids(resolved["holdout_frac"])
    eval_ds = dataset.subset(held)
    spec = sampling.SampleSpec(horizon=resolved["horizon"])
    latent_fn = model.make_latent_fn(params, placement)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([resolved["seed"], 11])))

    pd = probes.build_probe_dataset(latent_fn, eval_ds, resolved["probe_per_env"], spec, rng)
    labels = pd.env_labels
    if resolved["shuffled_labels"]:
        labels = rng.permutation(labels)
    acc = probes.env_probe(pd.latents, labels, rng)
    r2, ridge_used = probes.goal_probe(pd, rng)

    out = {
        "env_probe_acc": acc,
        "goal_probe_r2": r2,
        "goal_probe_ridge_fallback": ridge_used,
        "shuffled_labels": bool(resolved["shuffled_labels"]),
        "class_counts": pd.class_counts(),
        "seed": resolved["seed"],
        "placement": placement,
    }
    path = os.path.join(out_dir, "probe.json")
    with open(path, "w") as f:
        json.dump(out, f, indent=2)
        f.write("\n")
    print(path)
    print(f"env_probe_acc={acc:.4f} goal_probe_r2={r2:.4f} classes={pd.class_counts()}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _add_options(parser: argparse.ArgumentParser, keys: dict) -> None:
    parser.add_argument("--config", default=None, help="flat key = value config file")
    parser.add_argument("--threads", type=int, default=0, help="0 = deterministic single thread (always used)")
    for name, (typ, default, help_text) in keys.items():
        flag = "--" + name.replace("_", "-")
        shown = "required" if default is None else f"default {default}"
        parser.add_argument(flag, type=typ, default=None, dest=name, help=f"{help_text} ({shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lamlab", description="latent-action model laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in _COMMAND_KEYS.items():
        p = sub.add_parser(command, help=f"{command} command")
        _add_options(p, keys)
    return parser


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "probe": cmd_probe,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    keys = _COMMAND_KEYS[command]
    try:
        file_values = _read_config_file(args.config) if args.config else {}
        cli_values = {name: getattr(args, name) for name in keys}
        resolved = resolve_config(command, file_values, cli_values)
        return _DISPATCH[command](resolved)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_io.DatasetFormatError, data_io.CheckpointFormatError) as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_IO
    except data_io.CheckpointMismatchError as e:
        print(f"checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_CKPT
    except probes.InsufficientClassData as e:
        print(f"probe class error: {e}", file=sys.stderr)
        return EXIT_CLASS
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


def cli_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli_entry()
