"""Command-line entry point.

Exit codes: 0 success, 1 partial failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from llmseg._io import atomic_write_bytes, atomic_write_json
from llmseg.config import ConfigError, RunConfig, load_config, read_class_list

log = logging.getLogger("llmseg")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _classes_arg(value: str | None) -> list[str] | None:
    if value is None:
        return None
    p = Path(value)
    if p.is_file():
        return read_class_list(p)
    return [c.strip() for c in value.split(",") if c.strip()]


def _common_config(args, **extra) -> RunConfig:
    over = dict(extra)
    llm = {k: v for k, v in {
        "fixture_dir": getattr(args, "fixture_dir", None),
        "model_id": getattr(args, "model", None),
    }.items() if v is not None}
    if llm:
        over["llm"] = llm
    for name in ("cache_dir", "subclass_dir", "features_dir", "embed_url"):
        if getattr(args, name, None) is not None:
            over[name] = getattr(args, name)
    if getattr(args, "features", None) is not None:
        over["features"] = args.features
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    return load_config(getattr(args, "config", None), over)


def _dry_run(cfg: RunConfig, actions: list[str]) -> int:
    print(json.dumps({"config": cfg.canonical(), "config_hash": cfg.config_hash(), "actions": actions}, indent=2))
    return EXIT_OK


def cmd_gen_subclasses(args) -> int:
    from llmseg.pipeline import safe_name
    from llmseg.subclass_gen import (
        EndpointError, GenerationError, generate_subclasses, make_client, save_subclass_set,
    )

    classes = [args.class_name] if args.class_name else None
    if args.class_list:
        classes = [c for c in read_class_list(args.class_list) if c != "background"]
    if not classes:
        raise ConfigError("give --class or --class-list")
    cfg = _common_config(args, n_subclasses=args.n, prompt_mode=args.prompt.upper())
    out = Path(args.out)
    if args.dry_run:
        return _dry_run(cfg, [f"generate {cfg.n_subclasses} {cfg.prompt_mode} subclasses for {c} -> "
                              f"{out / (safe_name(c) + '.json')}" for c in classes])

    endpoint = cfg.llm.endpoint()
    cache = Path(cfg.cache_dir) / "subclasses"
    client_box = {}

    def client():
        if "c" not in client_box:
            client_box["c"] = make_client(endpoint)
        return client_box["c"]

    def one(c):
        return generate_subclasses(c, cfg.n_subclasses, cfg.prompt_mode, endpoint, cache, client_factory=client)

    failures = []
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [(c, pool.submit(one, c)) for c in classes]
        for c, fut in futures:
            try:
                sset = fut.result()
            except EndpointError as exc:
                if "LLMSEG_" in str(exc):
                    raise ConfigError(str(exc)) from exc
                failures.append(f"{c}: {exc}")
                continue
            except GenerationError as exc:
                failures.append(f"{c}: {exc}")
                continue
            save_subclass_set(out / f"{safe_name(c)}.json", sset)
            print(f"{c}: {', '.join(sset.subclasses)}")
    return _report_failures(failures)


def _report_failures(failures) -> int:
    if failures:
        print(f"{len(failures)} failure(s):", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _check_classes(cfg: RunConfig, classes: list[str], features) -> None:
    if not classes:
        raise ConfigError("no classes given (--classes or config 'classes')")
    if cfg.class_list:
        known = set(read_class_list(cfg.class_list))
        unknown = [c for c in classes if c not in known or c == "background"]
    else:
        from llmseg.text_embed import expand_templates, resolve_templates

        tpl = resolve_templates(cfg.templates)
        unknown = [c for c in classes if not all(features.has_text(p) for p in expand_templates([c], tpl))]
    if unknown:
        raise ConfigError(f"unknown class name(s): {', '.join(unknown)}")


def cmd_segment(args) -> int:
    from llmseg.masks import load_rgb, save_labelmap, save_overlay
    from llmseg.pipeline import Segmenter, make_feature_source

    over = {}
    if args.lambda_super is not None:
        over["lambda_super"] = args.lambda_super
    if args.method is not None:
        over["ensemble_method"] = args.method
    if args.no_crf:
        over["crf"] = {"enabled": False}
    classes = _classes_arg(args.classes)
    if classes is not None:
        over["classes"] = classes
    cfg = _common_config(args, **over)
    if args.image:
        images = [Path(args.image)]
    elif args.images_dir:
        images = sorted(p for p in Path(args.images_dir).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    else:
        raise ConfigError("give --image or --images-dir")
    out = Path(args.out_dir)
    features = make_feature_source(cfg)
    _check_classes(cfg, cfg.classes or [], features)
    if args.dry_run:
        return _dry_run(cfg, [f"segment {p} -> {out / (p.stem + '.png')}" for p in images])

    seg = Segmenter(cfg, features=features)
    try:
        seg.prepare()
    except Exception as exc:
        raise ConfigError(f"cannot resolve text descriptors: {exc}") from exc
    atomic_write_json(out / "config.json", {"config": cfg.canonical(), "config_hash": cfg.config_hash()})
    atomic_write_json(out / "classes.json", {"0": "background", **{str(i + 1): c for i, c in enumerate(seg.class_names)}})
    atomic_write_json(out / "subclasses.json", {
        c: (seg.class_text(c).subclass_set.to_dict() if seg.class_text(c).subclass_set else None)
        for c in seg.class_names
    })

    rows, failures = [], []
    for path, res in seg.segment_many(images):
        if isinstance(res, Exception):
            failures.append(f"{path.name}: {res}")
            rows.append([path.stem, "failed", "", ""] + [""] * (len(seg.class_names) + 1))
            continue
        save_labelmap(out / f"{res.image_id}.png", res.labels)
        save_overlay(out / f"{res.image_id}_overlay.png", load_rgb(path), res.labels)
        counts = [int((res.labels.labels == i).sum()) for i in range(len(seg.class_names) + 1)]
        rows.append([res.image_id, "ok", res.original_size[0], res.original_size[1]] + counts)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "status", "height", "width", "px_background"] + [f"px_{c}" for c in seg.class_names])
    w.writerows(rows)
    atomic_write_bytes(out / "summary.csv", buf.getvalue().encode())
    return _report_failures(failures)


def cmd_eval(args) -> int:
    from llmseg.bench import evaluate_dirs

    classes = _classes_arg(args.classes)
    if not classes:
        raise ConfigError("--classes must name the class list (background first)")
    report = evaluate_dirs(args.pred_dir, args.gt_dir, classes)
    if args.out:
        atomic_write_bytes(args.out, report.to_csv().encode())
    print(report.table(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    from llmseg.bench import DatasetSpec, run_benchmark

    cfg = _common_config(args)
    ds = DatasetSpec.from_config(cfg)
    if args.dry_run:
        return _dry_run(cfg, [f"benchmark {len(ds.sample_ids())} sample(s) -> {args.out_dir}"])
    report = run_benchmark(ds, cfg, out_dir=args.out_dir)
    print(report.table(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from llmseg.bench import DatasetSpec, ablate, parse_sweep, rows_to_csv

    try:
        axis, values = parse_sweep(args.sweep)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = _common_config(args)
    ds = DatasetSpec.from_config(cfg)
    if args.dry_run:
        return _dry_run(cfg, [f"benchmark with {axis}={v}" for v in values])
    rows = ablate(axis, values, ds, cfg, out_csv=args.out)
    print(rows_to_csv(rows), end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    from llmseg.synthetic import build_synthetic_benchmark

    sb = build_synthetic_benchmark(Path(args.out).resolve(), n_images=args.images, seed=args.seed)
    import yaml

    cfg_path = Path(args.out) / "config.yaml"
    cfg_path.write_text(yaml.safe_dump({**sb.config_overrides(), "templates": ["T1", "T4", "T7"]}, sort_keys=True))
    print(f"synthetic benchmark with {len(sb.sample_ids)} image(s) written to {args.out}; config at {cfg_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="llmseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, features=False):
        sp.add_argument("--config", help="YAML/JSON run config")
        sp.add_argument("--cache-dir")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--dry-run", action="store_true", help="print resolved config and planned actions only")
        if features:
            sp.add_argument("--features", choices=["dir", "service"])
            sp.add_argument("--features-dir")
            sp.add_argument("--embed-url")
            sp.add_argument("--subclass-dir")
            sp.add_argument("--fixture-dir", help="canned LLM responses (offline mode)")

    g = sub.add_parser("gen-subclasses", help="generate subclass sets with the LLM")
    g.add_argument("--class", dest="class_name")
    g.add_argument("--class-list")
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--prompt", choices=["p1", "p2", "P1", "P2"], default="p2")
    g.add_argument("--out", required=True)
    g.add_argument("--model")
    g.add_argument("--fixture-dir", help="canned LLM responses (offline mode)")
    common(g)
    g.set_defaults(func=cmd_gen_subclasses)

    s = sub.add_parser("segment", help="segment images")
    s.add_argument("--image")
    s.add_argument("--images-dir")
    s.add_argument("--classes", help="comma-separated names or a class-list file")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--lambda", dest="lambda_super", type=float)
    s.add_argument("--method", choices=["paper", "average", "cross_attention", "max_similarity"])
    s.add_argument("--no-crf", action="store_true")
    common(s, features=True)
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("eval", help="score predicted label PNGs against ground truth")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--classes", required=True, help="class-list file or comma list, background first")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="segment and score a dataset")
    b.add_argument("--out-dir", required=True)
    common(b, features=True)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="sweep one setting over a dataset")
    a.add_argument("--sweep", required=True, help="axis=values, e.g. lambda=0:1:0.2 or ensemble_method=paper,average")
    a.add_argument("--out", required=True)
    common(a, features=True)
    a.set_defaults(func=cmd_ablate)

    y = sub.add_parser("synth", help="write the planted-truth synthetic benchmark")
    y.add_argument("--out", required=True)
    y.add_argument("--images", type=int, default=4)
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        from llmseg.bench import BenchmarkError
        from llmseg.text_embed import FeatureError

        if isinstance(exc, (BenchmarkError, FeatureError, ValueError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_PARTIAL
        raise


if __name__ == "__main__":
    sys.exit(main())
