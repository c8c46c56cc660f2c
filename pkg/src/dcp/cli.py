"""Command-line entry point: ``dcp <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 incompatible or
unreadable artifact, 4 numerical failure during a run.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from dcp import __version__
from dcp.errors import CheckpointError, ConfigError, NumericalError, SamplingError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dcp")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def artifact_hash():
    """sha256 over the package sources, used to tie a run to the code that made it."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(run_dir, command, argv, config_path=None, config=None, seeds=None, started=None):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_path": str(config_path) if config_path else None,
        "config": config.to_dict() if config is not None else None,
        "artifact_hash": artifact_hash(),
        "version": __version__,
        "started": started or datetime.now(timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "seeds": seeds or {},
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_image(path):
    try:
        return np.asarray(Image.open(path).convert("RGB"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc


def read_mask(path):
    """PNG mask with 0/255 (or 0/1) values -> {0, 1} array."""
    try:
        arr = np.asarray(Image.open(path).convert("L"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.int64) if arr.max() > 1 else arr.astype(np.int64)


def write_mask(path, mask):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def write_map(path, values, lo=-1.0, hi=1.0, scale=1):
    import matplotlib

    cmap = matplotlib.colormaps["jet"]
    norm = np.clip((np.asarray(values) - lo) / (hi - lo), 0, 1)
    rgb = (cmap(norm)[..., :3] * 255).astype(np.uint8)
    if scale > 1:
        rgb = rgb.repeat(scale, 0).repeat(scale, 1)
    Image.fromarray(rgb).save(path)


def _load_model(path):
    from dcp.checkpoint import load_model

    return load_model(path)


def _support_episode(images, masks, query):
    from dcp.episodes import Episode

    if len(images) != len(masks):
        raise UsageError(f"{len(images)} support images but {len(masks)} support masks; every support image needs a mask")
    if not images:
        raise UsageError("at least one support image is required")
    support = [(read_image(i), read_mask(m)) for i, m in zip(images, masks)]
    for (img, m), name in zip(support, images):
        if img.shape[:2] != m.shape:
            raise UsageError(f"support {name}: image {img.shape[:2]} and mask {m.shape} sizes differ")
    return Episode(support=support, query_image=read_image(query), query_mask=None, class_id=0, episode_seed=0)


# ---------------------------------------------------------------- commands


def cmd_train(args):
    from dcp.config import load_config
    from dcp.training import Trainer

    started = datetime.now(timezone.utc).isoformat()
    cfg = load_config(args.config, args.set or ())
    run_dir = Path(args.run_dir or f"runs/train-{time.strftime('%Y%m%d-%H%M%S')}")
    trainer = Trainer(cfg, run_dir)
    if args.resume:
        trainer.resume(args.resume)
    try:
        final = trainer.run(max_steps=args.max_steps)
    finally:
        write_manifest(run_dir, "train", sys.argv, args.config, cfg, trainer.seeds, started)
    print(final)
    return EXIT_OK


def cmd_eval(args):
    from dcp.episodes import EpisodeSampler, build_eval_suite, make_split
    from dcp.data import open_dataset
    from dcp.metrics import evaluate_multi, oracle_predictor

    started = datetime.now(timezone.utc).isoformat()
    if args.episodes <= 0:
        raise UsageError("--episodes must be positive")
    if args.seeds <= 0:
        raise UsageError("--seeds must be positive")
    if args.oracle:
        from dcp.config import RunConfig

        cfg = RunConfig()
        model = oracle_predictor
    else:
        if not args.checkpoint:
            raise UsageError("a checkpoint is required")
        model, ckpt = _load_model(args.checkpoint)
        cfg = ckpt.config
    data = cfg.data
    dataset_name = args.dataset or data.dataset
    fold = data.fold if args.fold is None else args.fold
    root = args.data_root or data.root
    min_area = data.min_fg_area if args.min_fg_area is None else args.min_fg_area
    dataset = open_dataset(dataset_name, root, data.synthetic_images_per_class, data.synthetic_seed,
                           data.synthetic_companion_prob)
    split = make_split(dataset_name, fold)
    sampler = EpisodeSampler(dataset, split, min_area)
    run_seeds = [args.seed_base + i for i in range(args.seeds)]
    suites = {s: build_eval_suite(split, args.episodes, args.shot, s, sampler=sampler) for s in run_seeds}
    report = evaluate_multi(model, suites, pooled=not args.per_episode)

    out = Path(args.out or "eval")
    for r in report.runs:
        r.write(out, stem=f"report_seed{r.run_seed}", plot=args.plot)
    (out / "report_mean.json").write_text(json.dumps(report.to_dict(), indent=2))
    write_manifest(out, "eval", sys.argv, None, cfg, {"run_seeds": run_seeds}, started)
    print(json.dumps({"miou": report.miou, "fb_iou": report.fb_iou}))
    return EXIT_OK


def _predict(model, episode, details=False):
    import torch.nn.functional as F

    from dcp.network import forward_episode

    out = forward_episode(model, episode, details=details)
    h, w = episode.query_image.shape[:2]
    mask = out.mask[0]
    if tuple(mask.shape) != (h, w):
        mask = F.interpolate(mask[None, None].float(), size=(h, w), mode="nearest")[0, 0].long()
    return mask.numpy(), out


def dump_activations(out, directory, scale=4):
    from dcp.maskdiv import RegionPartition, render_partition

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {"f": "foreground", "b": "background"}
    d = out.details
    for kind, m in d["maps"].items():
        write_map(directory / f"activation_{names.get(kind, kind)}.png", m[0].numpy(), scale=scale)
    for k in range(d["support_pred"].shape[1]):
        regions = {kd: d["regions"][kd][0, k].numpy().astype(np.int64) for kd in ("alpha", "beta", "gamma", "delta")}
        img = render_partition(RegionPartition(**regions), scale=scale)
        Image.fromarray(img).save(directory / f"regions_shot{k}.png")
    return directory


def cmd_predict(args):
    model, _ = _load_model(args.checkpoint)
    episode = _support_episode(args.support_image, args.support_mask or [], args.query)
    mask, out = _predict(model, episode, details=bool(args.dump_activations))
    write_mask(args.out, mask)
    if args.dump_activations:
        dump_activations(out, args.dump_activations)
    print(args.out)
    return EXIT_OK


def cmd_activations_dump(args):
    model, _ = _load_model(args.checkpoint)
    episode = _support_episode(args.support_image, args.support_mask or [], args.query)
    _, out = _predict(model, episode, details=True)
    dump_activations(out, args.out_dir)
    print(args.out_dir)
    return EXIT_OK


def cmd_maskdiv_inspect(args):
    from dcp.maskdiv import divide, downsample_mask, render_partition

    if args.checkpoint:
        if not (args.image and args.gt):
            raise UsageError("--checkpoint needs --image and --gt")
        model, _ = _load_model(args.checkpoint)
        episode = _support_episode([args.image], [args.gt], args.image)
        _, out = _predict(model, episode, details=True)
        pred = out.details["support_pred"][0, 0].numpy().astype(np.int64)
        gt = out.details["support_gt"][0, 0].numpy().astype(np.int64)
    else:
        if not (args.pred and args.gt):
            raise UsageError("give --pred and --gt masks, or --checkpoint with --image and --gt")
        pred = read_mask(args.pred)
        gt = read_mask(args.gt)
        if gt.shape != pred.shape:
            gt = downsample_mask(gt, *pred.shape)
    partition = divide(pred, gt)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_partition(partition, scale=args.scale)).save(args.out)
    counts = {k: int(v.sum()) for k, v in partition.as_dict().items()}
    print(json.dumps(counts))
    return EXIT_OK


def cmd_count_params(args):
    from dcp.config import load_config
    from dcp.network import count_params

    cfg = load_config(args.config, args.set or ())
    n = count_params(cfg.model)
    print(json.dumps({"backbone": cfg.model.backbone, "learnable_params": n}))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="dcp", description="Few-shot segmentation with divide-and-conquer proxies.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="episodic training")
    t.add_argument("--config", help="YAML config file")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    t.add_argument("--run-dir", help="output directory (default runs/train-<time>)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--max-steps", type=int, help="stop after this many total steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out classes")
    e.add_argument("checkpoint", nargs="?")
    e.add_argument("--episodes", type=int, default=1000)
    e.add_argument("--seeds", type=int, default=5, help="number of evaluation runs")
    e.add_argument("--seed-base", type=int, default=0)
    e.add_argument("--shot", type=int, default=1)
    e.add_argument("--dataset", choices=("synthetic", "pascal5i", "coco20i"))
    e.add_argument("--fold", type=int)
    e.add_argument("--data-root")
    e.add_argument("--min-fg-area", type=int)
    e.add_argument("--per-episode", action="store_true", help="average per-episode IoUs instead of pooling counts")
    e.add_argument("--plot", action="store_true", help="also render confusion matrices")
    e.add_argument("--out", help="report directory (default ./eval)")
    e.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    e.set_defaults(func=cmd_eval)

    for name, func, help_ in (
        ("predict", cmd_predict, "segment a query image"),
        ("activations-dump", cmd_activations_dump, "write per-kind activation maps"),
    ):
        q = sub.add_parser(name, help=help_)
        q.add_argument("checkpoint")
        q.add_argument("--support-image", action="append", required=True)
        q.add_argument("--support-mask", action="append")
        q.add_argument("--query", required=True)
        if name == "predict":
            q.add_argument("--out", required=True, help="output mask PNG")
            q.add_argument("--dump-activations", metavar="DIR")
        else:
            q.add_argument("--out-dir", required=True)
        q.set_defaults(func=func)

    m = sub.add_parser("maskdiv-inspect", help="render the four support regions")
    m.add_argument("--pred", help="coarse prediction mask PNG")
    m.add_argument("--gt", help="ground-truth mask PNG")
    m.add_argument("--checkpoint", help="compute the coarse mask with this model")
    m.add_argument("--image", help="support image (with --checkpoint)")
    m.add_argument("--scale", type=int, default=8)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_maskdiv_inspect)

    c = sub.add_parser("count-params", help="count learnable parameters")
    c.add_argument("--config")
    c.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    c.set_defaults(func=cmd_count_params)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ValidationError, SamplingError) as exc:
        print(f"dcp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"dcp {args.command}: incompatible artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericalError as exc:
        print(f"dcp {args.command}: numerical failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
