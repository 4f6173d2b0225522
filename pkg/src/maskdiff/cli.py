"""Command-line pipeline entry point.

Stages: gen-toy-data, cluster, train, inpaint, stylize, eval, seg-train,
seg-test, report. Every stage takes --config/--seed/--out, derives all
randomness from the master seed, and writes a RunManifest into the output
directory. Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from .clustering import FULL_MODEL, build_registry, ClusterRegistry, embed_dataset, kmeans
from .config import Config, ConfigError
from .data import (
    Sample,
    gen_toy_data,
    hash_paths,
    hash_paths_combine,
    load_dataset,
    load_sample,
    save_sample,
    stack_dataset,
    write_dataset,
)
from .diffusion import train_model
from .manifest import RunManifest
from .metrics import eval_report
from .repaint import binarize_and_dilate, repaint_plan, repaint_walk
from .rng import derive_seed, stream
from .segmentation import AugPlan, SegNet, augment_dataset, test_seg, train_seg
from .styling import FeatureExtractor, stylize

_SYNTH_RE = re.compile(r"^(?P<src>.+)_synth(?P<k>\d+)(?P<styled>_styled)?$")


class ValidationError(Exception):
    """Bad arguments, config, or input layout: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit(2); the contract is 1
        raise ValidationError(f"{message}\n{self.format_usage()}")


def _common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    sub.add_argument("--seed", type=int, default=0, help="master seed for all stage randomness")
    sub.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> _Parser:
    p = _Parser(prog="maskdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy-data", help="write a deterministic toy lesion dataset")
    _common(g)
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--size", type=int, default=None)
    g.add_argument("--shifted", action="store_true", help="alternate texture statistics")

    c = sub.add_parser("cluster", help="embed pairs and partition into k clusters")
    _common(c)
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--k", type=int, default=None)

    t = sub.add_parser("train", help="train denoiser(s) for clusters and/or the full set")
    _common(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--registry", type=Path, default=None, help="registry from the cluster stage")
    t.add_argument("--target", default="full", help="'full', 'all', or a cluster id")
    t.add_argument("--iters", type=int, default=None, help="override train_iters")

    i = sub.add_parser("inpaint", help="generate synthetic variants of each source")
    _common(i)
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--registry", type=Path, required=True)
    i.add_argument("--samples", type=int, default=None, help="override gen_samples")
    i.add_argument("--limit", type=int, default=None, help="only the first N sources")

    s = sub.add_parser("stylize", help="loss-guided restyling of inpainted outputs")
    _common(s)
    s.add_argument("--data", type=Path, required=True, help="source dataset root")
    s.add_argument("--inpainted", type=Path, required=True, help="inpaint stage output dir")
    s.add_argument("--registry", type=Path, required=True)
    s.add_argument("--limit", type=int, default=None)

    e = sub.add_parser("eval", help="FID / MS-SSIM report against the real set")
    _common(e)
    e.add_argument("--real", type=Path, required=True)
    e.add_argument("--synth", action="append", default=[], metavar="TAG=DIR")

    st = sub.add_parser("seg-train", help="train the toy segmentation net")
    _common(st)
    st.add_argument("--data", type=Path, required=True)
    st.add_argument("--synth", type=Path, default=None, help="synthetic samples for augmentation")
    st.add_argument("--alpha", type=float, default=None, help="override aug_alpha")
    st.add_argument("--r", type=int, default=None, help="override aug_r")

    se = sub.add_parser("seg-test", help="evaluate a segmentation checkpoint")
    _common(se)
    se.add_argument("--checkpoint", type=Path, required=True)
    se.add_argument("--data", type=Path, required=True)
    se.add_argument("--tag", default="test")

    r = sub.add_parser("report", help="combine eval and segmentation CSVs")
    _common(r)
    r.add_argument("--eval-csv", action="append", default=[], type=Path)
    r.add_argument("--seg-csv", action="append", default=[], type=Path)
    return p


def _extractor(cfg: Config, net=None) -> FeatureExtractor:
    if cfg.extractor_mode == "seeded":
        return FeatureExtractor("seeded", seed=cfg.extractor_seed, input_size=cfg.image_size)
    if cfg.extractor_mode == "denoiser-taps":
        if net is None:
            raise ValidationError("extractor_mode denoiser-taps needs a trained model for this stage")
        return FeatureExtractor("denoiser-taps", net=net, input_size=cfg.image_size)
    raise ValidationError(f"unknown extractor_mode {cfg.extractor_mode!r}")


def _hash_tree(*roots: Path | None) -> str:
    parts = []
    for root in roots:
        if root is None:
            continue
        if root.is_dir():
            files = [p for p in sorted(root.rglob("*")) if p.is_file()]
            parts.append(hash_paths(files, root))
        elif root.is_file():
            parts.append(hash_paths([root]))
    if not parts:
        return "empty"
    return hash_paths_combine(parts)


def _load_flat_samples(root: Path, limit: int | None = None) -> list[Sample]:
    """Load pipeline outputs: DTF sidecars next to their image files."""
    names = sorted(p.stem for p in root.glob("*.dtf"))
    if limit is not None:
        names = names[:limit]
    return [load_sample(root, name) for name in names]


def _load_any(root: Path, size: int) -> list[Sample]:
    if (root / "images").is_dir():
        return load_dataset(root, size)
    if not root.is_dir():
        raise ValidationError(f"{root} is not a directory")
    samples = _load_flat_samples(root)
    if not samples:
        raise ValidationError(f"{root}: no dataset layout (images/) and no .dtf samples")
    return samples


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _stage_gen_toy_data(args, cfg: Config, man: RunManifest) -> None:
    count = args.count if args.count is not None else cfg.toy_count
    size = args.size if args.size is not None else cfg.image_size
    shifted = args.shifted or cfg.toy_shifted
    samples = gen_toy_data(count, args.seed, size=size, shifted=shifted)
    write_dataset(samples, args.out)
    man.input_hash = "generated"
    man.add_outputs([p for p in sorted(args.out.rglob("*.png"))], args.out)


def _stage_cluster(args, cfg: Config, man: RunManifest) -> None:
    samples = load_dataset(args.data, cfg.image_size)
    man.input_hash = _hash_tree(args.data)
    k = args.k if args.k is not None else cfg.cluster_k
    extractor = _extractor(cfg)
    emb = embed_dataset([s.x for s in samples], extractor, normalize=cfg.cluster_normalize)
    rng = stream(args.seed, "kmeans")
    man.streams["kmeans"] = derive_seed(args.seed, "kmeans")
    assignment, centroids = kmeans(emb, k, rng, cfg.cluster_max_iter)
    registry = build_registry(
        {s.name: int(a) for s, a in zip(samples, assignment)},
        {},
        centroids=centroids,
        base_dir=args.out,
    )
    registry.save(args.out / "registry.txt")
    registry.export_membership_csv(args.out / "membership.csv")
    man.add_outputs([args.out / "registry.txt", args.out / "membership.csv"], args.out)


def _stage_train(args, cfg: Config, man: RunManifest) -> None:
    samples = load_dataset(args.data, cfg.image_size)
    man.input_hash = _hash_tree(args.data, args.registry)
    by_name = {s.name: s for s in samples}
    if args.registry is not None:
        registry = ClusterRegistry.load(args.registry)
    else:
        registry = build_registry({}, {}, base_dir=args.out)
    if args.target == "all":
        targets: list[int | str] = [FULL_MODEL] + (sorted(set(registry.assignment.values())) if registry.assignment else [])
    elif args.target == FULL_MODEL:
        targets = [FULL_MODEL]
    else:
        try:
            targets = [int(args.target)]
        except ValueError:
            raise ValidationError(f"--target must be 'full', 'all', or an integer, got {args.target!r}")
    outputs = []
    for target in targets:
        if target == FULL_MODEL:
            subset = samples
        else:
            names = registry.members(int(target))
            if not names:
                raise ValidationError(f"cluster {target} has no members in the registry")
            subset = [by_name[n] for n in names]
        tc = cfg.train_config(seed=args.seed)
        if args.iters is not None:
            tc.iterations = args.iters
        rng = stream(args.seed, "train", str(target))
        man.streams[f"train.{target}"] = derive_seed(args.seed, "train", str(target))
        net, losses = train_model(stack_dataset(subset), tc, rng=rng)
        ckpt = args.out / (f"model_{target}.ckpt" if target == FULL_MODEL else f"model_c{target}.ckpt")
        net.save(ckpt, config=tc.to_dict())
        outputs.append(ckpt)
        trace = args.out / (f"loss_{target}.csv")
        trace.write_text("iter,loss\n" + "\n".join(f"{i},{v:.6f}" for i, v in enumerate(losses)) + "\n")
        outputs.append(trace)
        if target == FULL_MODEL:
            registry.full_checkpoint = ckpt.name
        else:
            registry.checkpoints[int(target)] = ckpt.name
    registry.base_dir = args.out
    registry.save(args.out / "registry.txt")
    outputs.append(args.out / "registry.txt")
    man.add_outputs(outputs, args.out)


def _stage_inpaint(args, cfg: Config, man: RunManifest) -> None:
    sources = load_dataset(args.data, cfg.image_size)
    if args.limit is not None:
        sources = sources[: args.limit]
    man.input_hash = _hash_tree(args.data, args.registry)
    registry = ClusterRegistry.load(args.registry)
    gen = cfg.generation_config()
    if args.samples is not None:
        gen.samples = args.samples
    respaced = cfg.train_config().make_respaced()
    plan = repaint_plan(respaced.start, gen.jump_len, gen.resamples)

    # group (source, variant) pairs by their drawn model so walks batch well
    jobs: dict[object, list[tuple[Sample, int, np.random.Generator]]] = {}
    passthrough: list[tuple[Sample, int]] = []
    masks = {}
    for src in sources:
        mask = binarize_and_dilate((src.x[3] + 1.0) / 2.0, gen.mask_threshold, gen.dilation_radius)
        masks[src.name] = mask
        if mask.all_known:
            man.warn(f"{src.name}: mask has no label region; outputs equal the source")
            passthrough.extend((src, k) for k in range(gen.samples))
            continue
        if mask.all_unknown:
            man.warn(f"{src.name}: dilated mask covers the whole image")
        for k in range(gen.samples):
            rng = stream(args.seed, "inpaint", src.name, k)
            cluster = registry.pick_model(rng)
            jobs.setdefault(cluster, []).append((src, k, rng))

    out_dir = args.out / "synthetic"
    outputs = []
    for src, k in passthrough:
        outputs += save_sample(Sample(f"{src.name}_synth{k}", src.x.copy()), out_dir)
    batch_size = 16
    for cluster, pairs in sorted(jobs.items(), key=lambda kv: str(kv[0])):
        net = registry.load_net(cluster)
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            xs = np.stack([src.x for src, _, _ in chunk])
            ms = [masks[src.name] for src, _, _ in chunk]
            rngs = [rng for _, _, rng in chunk]
            outs = repaint_walk(net, xs, ms, plan, respaced, rngs, gen.variance_mode)
            for (src, k, _), out in zip(chunk, outs):
                outputs += save_sample(Sample(f"{src.name}_synth{k}", out), out_dir)
    man.add_outputs(outputs, args.out)


def _stage_stylize(args, cfg: Config, man: RunManifest) -> None:
    sources = {s.name: s for s in load_dataset(args.data, cfg.image_size)}
    man.input_hash = _hash_tree(args.data, args.inpainted, args.registry)
    registry = ClusterRegistry.load(args.registry)
    if cfg.style_model == FULL_MODEL:
        net = registry.load_net(FULL_MODEL)
    else:
        net = registry.load_net(int(cfg.style_model))
    extractor = _extractor(cfg, net)
    weights = cfg.style_weights()
    respaced = cfg.train_config().make_respaced()

    inpainted = _load_flat_samples(args.inpainted / "synthetic" if (args.inpainted / "synthetic").is_dir() else args.inpainted)
    pairs = []
    for samp in inpainted:
        m = _SYNTH_RE.match(samp.name)
        if not m or m.group("styled"):
            continue
        src = sources.get(m.group("src"))
        if src is None:
            raise ValidationError(f"{samp.name}: source {m.group('src')!r} not in --data")
        pairs.append((samp, src))
    if args.limit is not None:
        pairs = pairs[: args.limit]
    if not pairs:
        raise ValidationError("no inpainted samples to stylize")

    out_dir = args.out / "styled"
    outputs = []
    skipped = 0
    batch = 8
    for ci, start in enumerate(range(0, len(pairs), batch)):
        chunk = pairs[start : start + batch]
        inp = np.stack([s.x for s, _ in chunk])
        src = np.stack([s.x for _, s in chunk])
        rng = stream(args.seed, "stylize", ci)
        loc_rngs = [stream(args.seed, "stylize-loc", s.name) for s, _ in chunk]
        styled, info = stylize(net, inp, src, respaced, weights, extractor, rng, loc_rngs, cfg.variance_mode)
        skipped += info["skipped_steps"]
        for (s, _), out in zip(chunk, styled):
            outputs += save_sample(Sample(f"{s.name}_styled", out), out_dir)
    if skipped:
        man.warn(f"guidance skipped on {skipped} steps (non-finite gradient)")
    man.streams["stylize"] = derive_seed(args.seed, "stylize", 0)
    man.add_outputs(outputs, args.out)


def _stage_eval(args, cfg: Config, man: RunManifest) -> None:
    reference = _load_any(args.real, cfg.image_size)
    man.input_hash = _hash_tree(args.real)
    datasets: dict[str, list[np.ndarray]] = {}
    for spec in args.synth:
        if "=" not in spec:
            raise ValidationError(f"--synth expects TAG=DIR, got {spec!r}")
        tag, d = spec.split("=", 1)
        datasets[tag] = [s.x for s in _load_any(Path(d), cfg.image_size)]
    extractor = _extractor(cfg)
    report = eval_report(
        datasets,
        [s.x for s in reference],
        extractor,
        repeats=cfg.eval_repeats,
        seed=args.seed,
        msssim_pairs=cfg.eval_msssim_pairs,
    )
    (args.out / "report.csv").write_text(report.to_csv())
    (args.out / "report.txt").write_text(report.to_text_table())
    man.add_outputs([args.out / "report.csv", args.out / "report.txt"], args.out)


def _group_synthetics(samples: list[Sample]) -> dict[str, list[Sample]]:
    groups: dict[str, list[Sample]] = {}
    for s in samples:
        m = _SYNTH_RE.match(s.name)
        if m:
            groups.setdefault(m.group("src"), []).append(s)
    return groups


def _stage_seg_train(args, cfg: Config, man: RunManifest) -> None:
    data = _load_any(args.data, cfg.image_size)
    man.input_hash = _hash_tree(args.data, args.synth)
    if args.synth is not None:
        synth = _group_synthetics(_load_any(args.synth, cfg.image_size))
        plan = AugPlan(
            alpha=args.alpha if args.alpha is not None else cfg.aug_alpha,
            r=args.r if args.r is not None else cfg.aug_r,
            m=cfg.aug_m,
            seed=args.seed,
            mode=cfg.aug_mode,
        )
        data = augment_dataset(data, synth, plan)
    net, history = train_seg(data, cfg.seg_config(seed=args.seed))
    man.streams["seg-train"] = derive_seed(args.seed, "seg-train")
    ckpt = args.out / "segnet.ckpt"
    net.save(ckpt)
    hist = args.out / "history.csv"
    hist.write_text(
        "epoch,loss,val_iou\n"
        + "\n".join(f"{h['epoch']},{h['loss']:.6f},{h['val_iou']:.6f}" for h in history)
        + "\n"
    )
    man.add_outputs([ckpt, hist], args.out)


def _stage_seg_test(args, cfg: Config, man: RunManifest) -> None:
    net = SegNet.load(args.checkpoint)
    test = _load_any(args.data, cfg.image_size)
    man.input_hash = _hash_tree(args.data, args.checkpoint)
    dice, iou = test_seg(net, test, threshold=cfg.seg_threshold)
    path = args.out / "seg_metrics.csv"
    path.write_text(f"tag,n,dice,iou\n{args.tag},{len(test)},{dice:.6f},{iou:.6f}\n")
    man.add_outputs([path], args.out)


def _stage_report(args, cfg: Config, man: RunManifest) -> None:
    man.input_hash = _hash_tree(*(args.eval_csv + args.seg_csv))
    lines = ["maskdiff combined report", "=" * 32, ""]
    for path in args.eval_csv:
        lines += [f"[generation metrics] {path.name}", Path(path).read_text().rstrip(), ""]
    if args.seg_csv:
        lines.append("[segmentation] tag, n, dice, iou")
        for path in args.seg_csv:
            body = Path(path).read_text().splitlines()[1:]
            lines += [f"  {row}" for row in body]
    text = "\n".join(lines) + "\n"
    (args.out / "combined_report.txt").write_text(text)
    man.add_outputs([args.out / "combined_report.txt"], args.out)


_STAGES = {
    "gen-toy-data": _stage_gen_toy_data,
    "cluster": _stage_cluster,
    "train": _stage_train,
    "inpaint": _stage_inpaint,
    "stylize": _stage_stylize,
    "eval": _stage_eval,
    "seg-train": _stage_seg_train,
    "seg-test": _stage_seg_test,
    "report": _stage_report,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = Config.from_file(args.config)
    except ConfigError as exc:
        raise ValidationError(str(exc))
    args.out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(
        command=" ".join(argv if argv is not None else sys.argv[1:]),
        master_seed=args.seed,
        config=dict(cfg.items()),
    )
    _STAGES[args.command](args, cfg, man)
    man.write(args.out)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure inside a stage
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
