"""Command-line driver: ``subfork {phantom,train,segment,solve,evaluate}``.

Exit codes: 0 success, 2 input/validation error, 3 numerical failure.
Every run writes a JSON manifest next to its outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .conductor import ConductivityTable, assign_conductivity, montage_from_descriptor
from .errors import (BoundsError, ConvergenceError, FormatError, PlacementError, ShapeError,
                     SingularSystemError, SpecError, UndefinedMetricError, ValidationError)
from .fusion import AXIS_ORDER, FusionConfig, probability_fuse_infer
from .metrics import MetricReport, field_report, segmentation_report
from .nn import NetworkSpec, TrainConfig, infer_volume, load_checkpoint, save_checkpoint, slice_dataset, train
from .spfd import SolverConfig, assemble, compute_efield, current_audit, multigrid_solve, sor_solve
from .volume import LabelVolume, PhantomSpec, ScalarVolume, load_volume, make_phantom, save_volume

log = logging.getLogger("subfork")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
INPUT_ERRORS = (ValidationError, ShapeError, FormatError, SpecError, BoundsError, UndefinedMetricError,
                FileNotFoundError, IsADirectoryError, NotADirectoryError, json.JSONDecodeError)
NUMERIC_ERRORS = (ConvergenceError, PlacementError, SingularSystemError, FloatingPointError)


# -- helpers ---------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config(args) -> dict:
    skip = {"func", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(path, args, inputs, outputs, t0, extra=None) -> dict:
    cfg = _config(args)
    man = {
        "subcommand": args.command,
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    if extra:
        man.update(extra)
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True, default=str)
    return man


def bundled(name: str) -> Path:
    return Path(str(resources.files("subfork.data").joinpath(name)))


def resolve_data(path: str) -> Path:
    """A file path, or the name of a bundled descriptor (``deep7``, ``head.json``)."""
    p = Path(path)
    if p.exists():
        return p
    for cand in (path, f"{path}.json"):
        b = bundled(cand)
        if "/" not in path and b.is_file():
            return b
    raise FileNotFoundError(f"no such file or bundled descriptor: {path}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def find_cases(root: Path) -> list[Path]:
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    cases = [root] if (root / "mri.vvol").is_file() else []
    cases += sorted(p for p in root.iterdir() if (p / "mri.vvol").is_file() and (p / "labels.vvol").is_file())
    return cases


# -- subcommands -------------------------------------------------------------


def cmd_phantom(args) -> int:
    t0 = time.perf_counter()
    spec_path = resolve_data(args.spec)
    spec = PhantomSpec.load(spec_path)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    dirs = [out] if args.cases == 1 else [out / f"case_{i:03d}" for i in range(args.cases)]
    for i, d in enumerate(dirs):
        d.mkdir(parents=True, exist_ok=True)
        mri, labels = make_phantom(spec, args.seed + i)
        save_volume(mri, d / "mri.vvol")
        save_volume(labels, d / "labels.vvol")
        written += [d / "mri.vvol", d / "labels.vvol"]
    write_manifest(out / "manifest.json", args, [spec_path], written, t0)
    print(f"wrote {len(dirs)} phantom case(s) to {out}")
    return EXIT_OK


def _load_pair(case: Path):
    mri, labels = load_volume(case / "mri.vvol"), load_volume(case / "labels.vvol")
    if not isinstance(mri, ScalarVolume) or not isinstance(labels, LabelVolume):
        raise ValidationError(f"{case}: expected a scalar mri.vvol and a label labels.vvol")
    return mri, labels


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    spec = NetworkSpec(degree=args.degree, depth=args.depth, input_size=args.input_size,
                       encoder_kernel=args.kernel, decoder_kernels=args.kernels)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed)
    cases = find_cases(Path(args.dataset))
    rng = np.random.default_rng([args.seed, 2])
    samples = []
    for case in cases:
        mri, labels = _load_pair(case)
        samples += slice_dataset(mri, labels, args.axis, spec, keep_empty=args.keep_empty, rng=rng)
    if not samples:
        raise ValidationError(f"no training slices found under {args.dataset}")
    order = np.random.default_rng([args.seed, 3]).permutation(len(samples))
    n_val = int(round(len(samples) * args.val_fraction)) if len(samples) > 1 else 0
    val = [samples[i] for i in order[:n_val]]
    trn = [samples[i] for i in order[n_val:]]
    log.info("training %s network on %d slices (%d validation)", args.axis, len(trn), len(val))
    res = train(spec, trn, cfg, validation=val or None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.params, out, extra={"axis": args.axis, "epochs": cfg.epochs, "seed": cfg.seed})
    loss_path = out.with_name(out.name + ".loss.json")
    with open(loss_path, "w") as fh:
        json.dump({"epoch": res.epochs, "train_loss": res.epoch_loss, "val_loss": res.val_loss}, fh, indent=2)
    write_manifest(out.with_name(out.name + ".manifest.json"), args,
                   [c / n for c in cases for n in ("mri.vvol", "labels.vvol")], [out, loss_path], t0,
                   {"train_slices": len(trn), "val_slices": len(val)})
    print(f"final loss {res.epoch_loss[-1]:.6f}; checkpoint {out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    t0 = time.perf_counter()
    mri = load_volume(args.mri)
    if not isinstance(mri, ScalarVolume):
        raise ValidationError(f"{args.mri} is not a scalar volume")
    params = {}
    for axis, path in zip(AXIS_ORDER, args.checkpoints):
        p, meta = load_checkpoint(path, with_meta=True)
        if meta.get("axis", axis) != axis:
            log.warning("checkpoint %s was trained on %s slices, used for %s", path, meta.get("axis"), axis)
        params[axis] = p
    degrees = {p.spec.degree for p in params.values()}
    if len(degrees) != 1:
        raise ValidationError(f"checkpoints disagree on degree N: {sorted(degrees)}")
    gm, allowed = None, None
    if args.gm_mask:
        gm = load_volume(args.gm_mask)
        if not isinstance(gm, LabelVolume):
            raise ValidationError(f"{args.gm_mask} is not a label volume")
        allowed = tuple(args.allowed_labels) if args.allowed_labels else (ConductivityTable.default().label_of("GM"),)
    cfg = FusionConfig(epsilon=args.epsilon, gm_mask=gm, allowed_labels=allowed)
    stacks = infer_volume(params, mri)
    fused = probability_fuse_infer(stacks, cfg, mri.spacing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(fused, out)
    inputs = [args.mri, *args.checkpoints] + ([args.gm_mask] if args.gm_mask else [])
    write_manifest(out.with_name(out.name + ".manifest.json"), args, inputs, [out], t0)
    print(f"fused segmentation written to {out}")
    return EXIT_OK


def _pad_for_solver(model: LabelVolume, pad: int, multiple: int):
    """Air margin of ``pad`` voxels, then extra trailing air to reach a multiple."""
    before = np.full(3, pad)
    size = np.asarray(model.dims) + 2 * pad
    after = before + (-size) % multiple
    data = np.pad(model.data, list(zip(before, after)))
    return LabelVolume(data, model.n_labels, model.spacing), before


def _shift_descriptor(desc: dict, offset_mm) -> dict:
    out = json.loads(json.dumps(desc))
    for key in ("anode", "cathode"):
        if key in out:
            out[key]["center"] = [float(c) + float(o) for c, o in zip(out[key]["center"], offset_mm)]
    return out


def cmd_solve(args) -> int:
    t0 = time.perf_counter()
    model = load_volume(args.model)
    if not isinstance(model, LabelVolume):
        raise ValidationError(f"{args.model} is not a label volume")
    table = ConductivityTable.load(resolve_data(args.table))
    assign_conductivity(model, table)  # reject unmapped labels before any padding
    with open(resolve_data(args.montage)) as fh:
        desc = json.load(fh)
    cfg = SolverConfig(method=args.method, tol=args.tol, omega=args.omega, mg_levels=args.levels,
                       max_iters=args.max_iters)
    plates = "plates" in desc
    pad = 0 if plates else args.pad
    if pad < 0:
        raise ValidationError("--pad must be >= 0")
    multiple = 2 ** (cfg.mg_levels - 1) if cfg.method == "multigrid" else 1
    if plates and any(d % multiple for d in model.dims):
        raise ValidationError(f"plate montages need dims divisible by {multiple} for {cfg.mg_levels} levels")
    padded, offset = _pad_for_solver(model, pad, multiple)
    sigma0 = assign_conductivity(padded, table)
    for key in ("anode", "cathode"):
        if key in desc:
            desc[key].setdefault("sponge_sigma", table.materials.get("sponge", 1.6))
            desc[key].setdefault("rubber_sigma", table.materials.get("rubber", 0.1))
    desc = _shift_descriptor(desc, offset * np.asarray(model.spacing))
    montage, reports = montage_from_descriptor(desc, sigma0, padded)
    sigma = montage.sigma
    grid, b = assemble(sigma, montage)
    field = multigrid_solve(grid, b, cfg, sigma) if cfg.method == "multigrid" else sor_solve(grid, b, cfg)
    ef = compute_efield(field, grid, sigma)

    # audit through the mid-plane between the electrodes along their widest separation
    src, snk = np.asarray(montage.source_node), np.asarray(montage.sink_node)
    ax = int(np.argmax(np.abs(src - snk)))
    plane = int((src[ax] + snk[ax]) // 2)
    plane = min(max(plane, 0), grid.shape[ax] - 2)
    audit = current_audit(field, grid, ax, plane)
    sign = 1.0 if src[ax] <= plane else -1.0

    crop = tuple(slice(o, o + d) for o, d in zip(offset, model.dims))
    ncrop = tuple(slice(o, o + d + 1) for o, d in zip(offset, model.dims))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"phi": out / "phi.vvol", "efield": out / "efield.vvol", "sigma": out / "sigma.vvol"}
    save_volume(ScalarVolume(field.phi[ncrop], model.spacing), paths["phi"])
    save_volume(ScalarVolume(ef.magnitude.data[crop], model.spacing), paths["efield"])
    save_volume(ScalarVolume(sigma.data[crop], model.spacing), paths["sigma"])
    report = {
        "method": cfg.method,
        "iterations": field.iterations,
        "fine_sweeps": field.sweeps,
        "residual": field.residual_norm,
        "residual_history": field.history,
        "solve_time_s": field.wall_time,
        "injected_current_A": montage.injected_current,
        "audit_current_A": sign * audit,
        "audit_plane": {"axis": ax, "plane": plane},
        "source_node": list(montage.source_node),
        "sink_node": list(montage.sink_node),
        "padding": offset.tolist(),
        "electrodes": {k: r.counts() for k, r in reports.items()},
        "max_efield_V_per_m": float(ef.magnitude.data[crop].max()),
    }
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    write_manifest(out / "manifest.json", args, [args.model, resolve_data(args.table), resolve_data(args.montage)],
                   list(paths.values()) + [out / "report.json"], t0)
    print(f"{cfg.method}: {field.iterations} iterations, residual {field.residual_norm:.2e}, "
          f"audit {sign * audit * 1e3:.4f} mA, max |E| {report['max_efield_V_per_m']:.4g} V/m")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    A, B = load_volume(args.seg_a), load_volume(args.seg_b)
    if not isinstance(A, LabelVolume) or not isinstance(B, LabelVolume):
        raise ValidationError("segmentations must be label volumes")
    if A.dims != B.dims:
        raise ShapeError(f"dims mismatch: {A.dims} vs {B.dims}")
    labels = args.labels or sorted(set(np.unique(A.data)) | set(np.unique(B.data)) - {0})
    report = MetricReport(segmentation=segmentation_report(A, B, [int(x) for x in labels], hd_mode=args.hd_mode))
    inputs = [args.seg_a, args.seg_b]
    if args.efield:
        EA, EB = (load_volume(p) for p in args.efield)
        if EA.dims != EB.dims or EA.dims != B.dims:
            raise ShapeError(f"field dims {EA.dims}/{EB.dims} do not match segmentation dims {B.dims}")
        regions = {}
        for lab in (args.regions or labels):
            regions[f"label_{lab}"] = B.data == lab
        report.fields = field_report(EA, EB, regions, args.percentile)
        inputs += list(args.efield)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    json_path = out.with_suffix(".json")
    report.write_json(json_path)
    write_manifest(out.with_name(out.name + ".manifest.json"), args, inputs, [out, json_path], t0)
    mean = report.segmentation.get("mean", {}).get("dice_pct")
    print(f"report written to {out}" + (f"; mean Dice {mean:.2f}%" if mean is not None else ""))
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subfork", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate synthetic MRI/label phantom volumes")
    s.add_argument("spec", help="phantom descriptor JSON (or bundled name: deep7, head)")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cases", type=int, default=1, help="number of cases (seeds seed..seed+cases-1)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train one per-axis network")
    s.add_argument("dataset", help="directory of {case}/mri.vvol + {case}/labels.vvol")
    s.add_argument("out", help="output checkpoint path")
    s.add_argument("--axis", choices=AXIS_ORDER, default="axial")
    s.add_argument("--degree", type=int, default=7)
    s.add_argument("--depth", type=int, default=2)
    s.add_argument("--input-size", type=int, default=256)
    s.add_argument("--kernel", type=int, default=3, help="encoder kernel size")
    s.add_argument("--kernels", type=_int_list, default=None, help="per-decoder kernel sizes, e.g. 5,7,7,7,5,5,7")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--keep-empty", type=float, default=1.0, help="fraction of label-free slices kept")
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="per-axis inference and fusion")
    s.add_argument("mri")
    s.add_argument("checkpoints", nargs=3, help="axial, sagittal and coronal checkpoints")
    s.add_argument("--out", required=True)
    s.add_argument("--epsilon", type=float, default=0.3)
    s.add_argument("--gm-mask", default=None, help="head-model label volume for GM elimination")
    s.add_argument("--allowed-labels", type=_int_list, default=None)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("solve", help="tDCS field solve on a labeled model")
    s.add_argument("model")
    s.add_argument("montage", help="montage descriptor JSON")
    s.add_argument("out_dir")
    s.add_argument("--table", default="conductivity.json", help="conductivity table (default: bundled)")
    s.add_argument("--method", choices=("sor", "multigrid"), default="sor")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--omega", type=float, default=1.9)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--max-iters", type=int, default=200000)
    s.add_argument("--pad", type=int, default=4, help="air margin (voxels) around the model")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("evaluate", help="segmentation and field error report")
    s.add_argument("seg_a", help="segmentation under test")
    s.add_argument("seg_b", help="reference segmentation")
    s.add_argument("--efield", nargs=2, metavar=("E_A", "E_B"))
    s.add_argument("--labels", type=_int_list, default=None)
    s.add_argument("--regions", type=_int_list, default=None, help="reference labels used as field regions")
    s.add_argument("--hd-mode", choices=("directed", "symmetric"), default="symmetric")
    s.add_argument("--percentile", type=float, default=99.9)
    s.add_argument("--out", required=True, help="CSV path; JSON is written alongside")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
