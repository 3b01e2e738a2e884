"""Command-line interface: ``recnet <subcommand> ...``.

Settings come from an optional JSON file (``--config``), whose keys mirror
the long flag names of the subcommand (dashes or underscores); flags given
on the command line win. The fully resolved settings are logged at start.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from recnet.errors import ConfigError, FormatError, ShapeError
from recnet.pointcloud_io import (
    PointCloud,
    read_cloud,
    read_kitti_poses,
    read_kitti_times,
    voxel_downsample,
    write_cloud_xyz,
    write_kitti_bin,
    write_kitti_poses,
)
from recnet.projection import ProjectionConfig, load_range_image, project, save_range_image, unproject

log = logging.getLogger("recnet")


class CliError(RuntimeError):
    pass


# shared helpers -------------------------------------------------------------


def _scan_id(path: Path, fallback: int) -> int:
    m = re.search(r"(\d+)$", path.stem)
    return int(m.group(1)) if m else fallback


def _inputs(path: Path, suffixes: tuple[str, ...]) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in suffixes)
        if not files:
            raise CliError(f"{path}: no {'/'.join(suffixes)} files")
        return files
    if not path.exists():
        raise CliError(f"{path}: no such file or directory")
    return [path]


def _add_projection_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("projection")
    g.add_argument("--profile", choices=["kitti", "mini"], help="image layout / network profile (default kitti)")
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--fov-up", type=float, help="degrees above the horizon")
    g.add_argument("--fov-down", type=float, help="degrees below the horizon")
    g.add_argument("--min-range", type=float)
    g.add_argument("--max-range", type=float)


def _projection(args) -> ProjectionConfig:
    from recnet.model import get_profile

    overrides = {}
    for key in ("width", "height", "min_range", "max_range"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    for key in ("fov_up", "fov_down"):
        if getattr(args, key, None) is not None:
            overrides[key] = math.radians(getattr(args, key))
    return get_profile(args.profile or "kitti").projection(**overrides)


def _load_model(path, profile=None):
    from recnet.model import load_weights

    return load_weights(path, profile).eval()


def _index_lookup(items: list, scan_id: int, what: str, source):
    if scan_id < 0 or scan_id >= len(items):
        raise CliError(f"no {what} for scan_id {scan_id} in {source}")
    return items[scan_id]


# subcommands ----------------------------------------------------------------


def cmd_synthetic(args) -> None:
    from recnet.synthetic import SceneSpec
    from recnet.training import make_synthetic_sequence

    spec = SceneSpec(
        trajectory=args.trajectory,
        n_scans=args.scans,
        spacing=args.spacing,
        radius=args.radius,
        laps=args.laps,
        rate_hz=args.rate,
        density=args.density,
    )
    seq = make_synthetic_sequence(spec, seed=args.seed, projection=_projection(args))
    out = Path(args.out)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    for i in range(len(seq)):
        write_kitti_bin(seq.load(i), out / "velodyne" / f"{i:06d}.bin")
    write_kitti_poses(seq.poses, out / "poses.txt")
    (out / "times.txt").write_text("".join(f"{t!r}\n" for t in seq.timestamps.tolist()))
    print(f"wrote {len(seq)} scans to {out}")


def cmd_project(args) -> None:
    cfg = _projection(args)
    src, out = Path(args.input), Path(args.out)
    files = _inputs(src, (".bin", ".xyz", ".txt"))
    single = not src.is_dir() and out.suffix == ".rimg"
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for f in files:
        try:
            image = project(read_cloud(f), cfg)
        except (FormatError, OSError) as exc:
            raise CliError(f"{f}: {exc}") from None
        save_range_image(image, out if single else out / f"{f.stem}.rimg")
    print(f"projected {len(files)} scan(s)")


def cmd_unproject(args) -> None:
    src, out = Path(args.input), Path(args.out)
    files = _inputs(src, (".rimg",))
    single = not src.is_dir() and out.suffix in (".xyz", ".txt")
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for f in files:
        write_cloud_xyz(unproject(load_range_image(f)), out if single else out / f"{f.stem}.xyz")
    print(f"unprojected {len(files)} image(s)")


def cmd_train(args) -> None:
    from recnet.plots import plot_training_log
    from recnet.synthetic import SceneSpec
    from recnet.training import (
        ScanSequence,
        TrainConfig,
        latest_checkpoint,
        make_synthetic_sequence,
        read_training_log,
        train,
    )

    raw = json.loads(Path(args.train_config).read_text())
    data = raw.pop("data", {})
    out = Path(args.out or raw.pop("output", "run"))
    raw.pop("output", None)
    if args.steps is not None:
        raw["steps"] = args.steps
    config = TrainConfig.from_dict(raw)
    log.info("training config: %s", json.dumps({"train": config.to_dict(), "data": data, "output": str(out)}, sort_keys=True))

    def sequence(section):
        if section is None:
            return None
        if "synthetic" in section:
            s = dict(section["synthetic"])
            seed = s.pop("seed", 0)
            return make_synthetic_sequence(SceneSpec(**s), seed=seed, projection=profile_projection)
        if "kitti" in section:
            k = section["kitti"]
            return ScanSequence.from_kitti(k["velodyne"], k["poses"], k.get("times"))
        raise ConfigError("data sections need a 'synthetic' or 'kitti' entry")

    from recnet.model import get_profile

    profile_projection = get_profile(config.profile).projection()
    seq_train = sequence(data.get("train"))
    if seq_train is None:
        raise ConfigError("training config has no data.train section")
    seq_val = sequence(data.get("val"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({**config.to_dict(), "data": data}, indent=2, sort_keys=True) + "\n")
    resume = None
    if args.resume:
        resume = latest_checkpoint(out / "checkpoints")
        if resume is None:
            raise CliError(f"--resume: no checkpoint in {out / 'checkpoints'}")
    result = train(seq_train, seq_val, config, out / "checkpoints", out / "train_log.csv", resume=resume)
    rows = read_training_log(out / "train_log.csv")
    if not args.no_plot:
        plot_training_log(rows, out / "train_log.png")
    last = f", final total loss {rows[-1][1].total:.6f}" if rows else ""
    print(f"trained steps {result.first_step}..{config.steps}{last}; checkpoints in {out / 'checkpoints'}")


def cmd_encode(args) -> None:
    from recnet.engine import no_grad
    from recnet.model import to_network
    from recnet.retrieval import DescriptorRecord
    from recnet.transmission import write_descriptor_file
    from recnet.pointcloud_io import Pose

    model = _load_model(args.weights)
    files = _inputs(Path(args.input), (".rimg",))
    poses = read_kitti_poses(args.poses) if args.poses else None
    times = read_kitti_times(args.times) if args.times else None
    records = []
    with no_grad():
        for i, f in enumerate(files):
            image = load_range_image(f)
            expected = model.profile.input_shape[1:]
            if (image.config.height, image.config.width) != expected:
                raise CliError(
                    f"{f}: image {image.config.height}x{image.config.width} does not fit profile "
                    f"{model.profile.name} ({expected[0]}x{expected[1]})"
                )
            sid = _scan_id(f, i)
            beta = model.encode(to_network(image)).data[0]
            pose = _index_lookup(poses, sid, "pose", args.poses) if poses is not None else Pose()
            t = _index_lookup(times, sid, "timestamp", args.times) if times is not None else 0.0
            records.append(DescriptorRecord(sid, beta, pose, t))
    n = write_descriptor_file(args.out, records, args.quantization, model.profile)
    print(f"encoded {len(records)} scan(s) into {args.out} ({n} bytes)")


def cmd_decode(args) -> None:
    from recnet.engine import Tensor, no_grad
    from recnet.model import from_network
    from recnet.transmission import read_descriptor_file

    stream = read_descriptor_file(args.input)
    model = _load_model(args.weights)
    if stream.profile.name != model.profile.name:
        raise CliError(f"descriptors are profile {stream.profile.name} but weights are {model.profile.name}")
    args.profile = model.profile.name
    cfg = _projection(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        for r in stream.records:
            image = from_network(model.decode(Tensor(r.bottleneck[None])), cfg)[0]
            save_range_image(image, out / f"{r.scan_id:06d}.rimg")
    print(f"decoded {len(stream.records)} descriptor(s) into {out}")


def _thresholds(args) -> list[float]:
    if args.thresholds:
        return [float(t) for t in args.thresholds.split(",")]
    return np.round(np.linspace(0.0, 1.0, args.num_thresholds), 10).tolist()


def cmd_eval_pr(args) -> None:
    from recnet.plots import plot_pr_curve
    from recnet.retrieval import DescriptorDB, OracleScorer, TailScorer, evaluate_pr, split_map_queries, write_pr_csv
    from recnet.transmission import read_descriptor_file

    if args.descriptors:
        db, queries = split_map_queries(read_descriptor_file(args.descriptors).records, args.map_seconds)
    elif args.db and args.queries:
        db = DescriptorDB(read_descriptor_file(args.db).records)
        queries = read_descriptor_file(args.queries).records
    else:
        raise CliError("give --descriptors, or both --db and --queries")
    if not queries:
        raise CliError("query set is empty")
    if not len(db):
        raise CliError("map database is empty")
    if args.oracle_tail:
        scorer = OracleScorer(args.m)
    elif args.weights:
        scorer = TailScorer(_load_model(args.weights))
    else:
        raise CliError("give --weights or --oracle-tail")
    curve = evaluate_pr(db, queries, scorer, args.gt_radius, _thresholds(args))
    write_pr_csv(curve, args.out)
    if not args.no_plot:
        plot_pr_curve(curve, Path(args.out).with_suffix(".png"))
    print(f"{len(queries)} queries against {len(db)} map records; {curve.relevant} relevant; wrote {args.out}")


def _cloud_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise CliError(f"{directory}: not a directory")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix in (".bin", ".xyz", ".txt")}


def cmd_eval_ssim(args) -> None:
    from recnet.metrics import evaluate_reconstruction, write_similarity_csv
    from recnet.plots import plot_similarity

    originals = _cloud_files(Path(args.original))
    if not originals:
        raise CliError(f"{args.original}: no cloud files")
    variants: dict[str, dict[str, Path]] = {}
    for spec in args.reconstructed:
        name, _, directory = spec.rpartition("=")
        variants[name or Path(directory).name] = _cloud_files(Path(directory))
    for name, files in variants.items():
        missing = sorted(set(originals) - set(files))
        extra = sorted(set(files) - set(originals))
        if missing or extra:
            raise CliError(f"{name}: missing stems {missing}, unexpected stems {extra}")
    stems = sorted(originals)
    orig = [read_cloud(originals[s]) for s in stems]
    clouds = {}
    if args.downsample_voxel:
        clouds["Downsampled"] = [voxel_downsample(c, args.downsample_voxel) for c in orig]
    for name, files in variants.items():
        clouds[name] = [read_cloud(files[s]) for s in stems]
    if not clouds:
        raise CliError("nothing to compare: give --reconstructed and/or --downsample-voxel")
    rows = evaluate_reconstruction(orig, clouds, args.k, args.radius)
    write_similarity_csv(rows, args.out, args.radius)
    if not args.no_plot:
        plot_similarity(rows, Path(args.out).with_suffix(".png"), args.radius)
    print(f"compared {len(stems)} scan(s) for {len(rows)} method(s); wrote {args.out}")


def _manifest_stats(manifest: dict, base: Path):
    from recnet.transmission import HEADER, mission_report, read_descriptor_file, record_size

    duration = float(manifest.get("duration", 0))
    scans = manifest.get("scans", [])
    if isinstance(scans, dict):
        scans = [(scans["points"], scans["points"] * scans.get("bytes_per_point", 16))] * int(scans["count"])
    else:
        scans = [(s["points"], s["bytes"]) if isinstance(s, dict) else tuple(s) for s in scans]
    if "scan_dir" in manifest:
        for f in sorted((base / manifest["scan_dir"]).glob("*.bin")):
            size = f.stat().st_size
            scans.append((size // 16, size))
    descriptors = manifest.get("descriptors", [])
    if isinstance(descriptors, dict):
        descriptors = [int(descriptors["bytes"])] * int(descriptors["count"])
    descriptors = [int(d) for d in descriptors]
    if "descriptor_file" in manifest:
        stream = read_descriptor_file(base / manifest["descriptor_file"])
        sizes = [record_size(stream.profile.bottleneck_shape, stream.mode)] * len(stream.records)
        if sizes:
            sizes[0] += HEADER.size
        descriptors += sizes
    return mission_report(scans, descriptors, duration)


def cmd_bandwidth(args) -> None:
    from recnet.plots import plot_bandwidth
    from recnet.transmission import format_mission_report

    path = Path(args.manifest)
    manifest = json.loads(path.read_text())
    missions = manifest["missions"] if "missions" in manifest else {manifest.get("name", path.stem): manifest}
    columns = {name: _manifest_stats(m, path.parent) for name, m in missions.items()}
    text = format_mission_report(columns)
    if args.out:
        Path(args.out).write_text(text)
        if not args.no_plot:
            plot_bandwidth(columns, Path(args.out).with_suffix(".png"))
    sys.stdout.write(text)


def cmd_reconstruct_map(args) -> None:
    from recnet.transmission import read_descriptor_file, reconstruct_map

    stream = read_descriptor_file(args.descriptors)
    model = _load_model(args.weights)
    if stream.profile.name != model.profile.name:
        raise CliError(f"descriptors are profile {stream.profile.name} but weights are {model.profile.name}")
    poses = None
    if args.poses:
        pose_list = read_kitti_poses(args.poses)
        poses = {r.scan_id: pose_list[r.scan_id] for r in stream.records if 0 <= r.scan_id < len(pose_list)}
        missing = [r.scan_id for r in stream.records if r.scan_id not in poses]
        if missing:
            raise CliError(f"no pose for scan_id {missing[0]} in {args.poses}")
    args.profile = model.profile.name
    cloud = reconstruct_map(stream.records, model, poses, _projection(args))
    write_cloud_xyz(cloud, args.out)
    print(f"reconstructed {len(cloud)} points from {len(stream.records)} descriptor(s) into {args.out}")


# parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recnet", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with default settings for the subcommand")
    parser.add_argument("--threads", type=int, default=None, help="limit BLAS threads (1 = deterministic)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthetic", help="write a synthetic KITTI-layout sequence")
    p.add_argument("out")
    p.add_argument("--scans", type=int, default=20)
    p.add_argument("--trajectory", choices=["line", "loop"], default="line")
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--radius", type=float, default=12.0)
    p.add_argument("--laps", type=float, default=1.0)
    p.add_argument("--rate", type=float, default=10.0, help="scans per second")
    p.add_argument("--density", type=float, default=80.0, help="surface samples per square meter")
    p.add_argument("--seed", type=int, default=0)
    _add_projection_args(p)
    p.set_defaults(func=cmd_synthetic, profile="mini")

    p = sub.add_parser("project", help="project scans to RIMG range images")
    p.add_argument("input", help="scan file or directory")
    p.add_argument("out", help="output directory (or .rimg file for a single scan)")
    _add_projection_args(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("unproject", help="turn RIMG range images back into xyz clouds")
    p.add_argument("input")
    p.add_argument("out")
    p.set_defaults(func=cmd_unproject)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("train_config")
    p.add_argument("--out", help="run directory (default: 'output' key or ./run)")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in the run directory")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode RIMG images into a RECB descriptor file")
    p.add_argument("input", help="RIMG file or directory")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--poses", help="KITTI pose file indexed by scan id")
    p.add_argument("--times", help="KITTI times file indexed by scan id")
    p.add_argument("--quantization", default="float32", choices=["float32", "float16", "uint8"])
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a RECB file into RIMG images")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--weights", required=True)
    _add_projection_args(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-pr", help="precision/recall of place recognition")
    p.add_argument("--db", help="map descriptors (RECB)")
    p.add_argument("--queries", help="query descriptors (RECB)")
    p.add_argument("--descriptors", help="one RECB file split by time into map and queries")
    p.add_argument("--map-seconds", type=float, default=170.0)
    p.add_argument("--weights")
    p.add_argument("--oracle-tail", action="store_true", help="score with exp(-d/m) from ground-truth poses")
    p.add_argument("--m", type=float, default=10.0)
    p.add_argument("--thresholds", help="comma-separated thresholds")
    p.add_argument("--num-thresholds", type=int, default=21)
    p.add_argument("--gt-radius", type=float, default=3.0)
    p.add_argument("--out", default="pr.csv")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval_pr)

    p = sub.add_parser("eval-ssim", help="structural similarity table of reconstructions")
    p.add_argument("--original", required=True)
    p.add_argument("--reconstructed", action="append", default=[], metavar="[NAME=]DIR")
    p.add_argument("--downsample-voxel", type=float, help="add a voxel-downsampled baseline row")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--radius", type=float, default=0.5)
    p.add_argument("--out", default="similarity.csv")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval_ssim)

    p = sub.add_parser("bandwidth", help="bandwidth report for a mission manifest")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_bandwidth)

    p = sub.add_parser("reconstruct-map", help="rebuild a map from descriptors and poses")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--poses", help="KITTI pose file; defaults to the poses stored in the descriptors")
    p.add_argument("--out", required=True)
    _add_projection_args(p)
    p.set_defaults(func=cmd_reconstruct_map)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    settings = json.loads(Path(args.config).read_text())
    section = settings.get(args.command, settings)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    defaults = {}
    for key, value in section.items():
        dest = key.replace("-", "_")
        if dest in known:
            defaults[dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config_file(parser, argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    log.info("resolved settings: %s", json.dumps(resolved, default=str))
    from recnet.training import TrainingDiverged

    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args)
        else:
            args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (CliError, ConfigError, FormatError, ShapeError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
