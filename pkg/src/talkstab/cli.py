"""``talkstab`` command line: flow, sense, stabilize, eval, control, mix, fixture.

Exit codes: 0 on success, 1 for I/O and file-format failures, 2 for usage and
validation errors. Data goes only to the declared output paths; diagnostics
go to stderr. ``--config file.json`` supplies defaults that explicit flags
override; keys are flag names (dashes or underscores), either at top level
or nested under the subcommand name.
"""

import argparse
import csv
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import FormatError, TalkstabError, ValidationError
from .fixtures import KINDS, FixtureSpec, make_fixture
from .media_io import (
    LandmarkTrack,
    load_embeddings,
    load_flow_series,
    load_frames,
    load_landmarks,
    load_mask,
    store_embeddings,
    store_flow_series,
    store_frames,
    store_landmarks,
)
from .metrics import cpbd, csld, lip_series, pcld, procrustes_disparity
from .noise_sensor import (
    DEFAULT_HALF_WIDTH,
    DEFAULT_LEVELS,
    DEFAULT_MIN_SAMPLES,
    load_noise_pattern,
    mean_noise_pattern,
    noise_pattern,
    normality_survey,
    stabilize,
    store_noise_pattern,
)
from .optical_flow import FlowParams, flow_series
from .structure_controller import DEFAULT_EPSILON_GAMMA, DEFAULT_LAMBDA_BOUNDS, StructureController, get_scheme
from .structurist import load_model, load_params, mix_parameters, project_landmarks, store_params, synthesize
from .swilk import MAX_N, MIN_N


class UsageError(ValidationError):
    pass


def _log(msg):
    print(f"talkstab: {msg}", file=sys.stderr)


def _write_json(path, doc):
    _ensure_parent(path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _config_echo(args):
    skip = {"func", "config", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _report(args, doc):
    doc["config"] = _config_echo(args)
    doc["version"] = __version__
    if args.stamp:
        doc["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return doc


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, ""):
            raise UsageError(f"missing required flag --{name.replace('_', '-')}")


def _mask(path):
    return load_mask(path) if path else None


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_flow(args):
    _require(args, "frames", "out")
    params = FlowParams(args.regularization, args.iterations, args.levels)
    seq = load_frames(args.frames)
    if len(seq) < 2:
        raise ValidationError(f"need >= 2 frames to compute flow, got {len(seq)}")
    _log(f"flow: {len(seq)} frames {seq.height}x{seq.width}")
    series = flow_series(seq, params, n_jobs=args.threads or None)
    store_flow_series(series, args.out)
    return 0


def cmd_sense(args):
    _require(args, "fake_flow", "real_flow", "out_pattern", "out_report")
    fake = load_flow_series(args.fake_flow)
    real = load_flow_series(args.real_flow)
    if len(fake) != len(real):
        raise ValidationError(f"length mismatch: {len(fake)} generated vs {len(real)} reference flow fields")
    mask = _mask(args.mask)
    pattern = noise_pattern(fake, real, mask, args.min_samples)
    store_noise_pattern(pattern, args.out_pattern)
    normality = {}
    for name, series in (("fake", fake), ("real", real)):
        if MIN_N <= len(series) <= MAX_N:
            normality[name] = normality_survey(series, mask, DEFAULT_LEVELS).to_dict()
        else:
            _log(f"sense: skipping normality survey of {name} flow ({len(series)} samples)")
            normality[name] = None
    doc = {
        "mnp": mean_noise_pattern(pattern, mask),
        "valid_pixels": int(pattern.valid.sum()),
        "samples": len(fake),
        "normality": normality,
    }
    _write_json(args.out_report, _report(args, doc))
    return 0


def cmd_stabilize(args):
    _require(args, "frames", "pattern", "out")
    seq = load_frames(args.frames)
    pattern = load_noise_pattern(args.pattern)
    out = stabilize(seq, pattern, args.half_width, _mask(args.mask))
    store_frames(out, args.out)
    return 0


def _pd_points(track, scheme, which):
    pts = track.points
    if which == "lips":
        idx = [i for i in get_scheme(scheme).lips if i < pts.shape[1]]
        if len(idx) >= 2:
            return pts[:, idx]
    return pts


def cmd_eval(args):
    _require(args, "gen_landmarks", "ref_landmarks", "out_report")
    gen = load_landmarks(args.gen_landmarks, args.scheme)
    ref = load_landmarks(args.ref_landmarks, args.scheme)
    if len(gen) != len(ref):
        raise ValidationError(f"track mismatch: {len(gen)} generated vs {len(ref)} reference frames")
    if gen.points.shape[1:] != ref.points.shape[1:]:
        raise ValidationError(f"track mismatch: point layout {gen.points.shape[1:]} vs {ref.points.shape[1:]}")
    gp, rp = _pd_points(gen, args.scheme, args.pd_points), _pd_points(ref, args.scheme, args.pd_points)
    pd = [procrustes_disparity(r, g, scaling=not args.no_scale).disparity for g, r in zip(gp, rp)]
    g_gen, g_ref = lip_series(gen, args.scheme), lip_series(ref, args.scheme)

    doc = {"pd": float(np.mean(pd)), "fid": None, "lpips": None}
    for name, fn in (("csld", csld), ("pcld", pcld)):
        try:
            doc[name] = fn(g_gen, g_ref)
        except ValidationError as exc:
            _log(f"eval: {name} undefined ({exc})")
            doc[name] = None

    per_frame = None
    if args.gen_frames:
        frames = load_frames(args.gen_frames)
        if len(frames) != len(gen):
            raise ValidationError(f"track mismatch: {len(frames)} frames vs {len(gen)} landmark frames")
        per_frame = [cpbd(f) for f in frames]
    doc["cpbd_per_frame"] = per_frame
    doc["cpbd_mean"] = None if per_frame is None else float(np.mean(per_frame))

    doc["mnp"] = None
    if args.noise_pattern:
        doc["mnp"] = mean_noise_pattern(load_noise_pattern(args.noise_pattern), _mask(args.mask))

    _write_json(args.out_report, _report(args, doc))
    csv_path = args.out_csv or os.path.splitext(args.out_report)[0] + ".csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "gamma_gen", "gamma_ref", "pd", "cpbd"])
        for t in range(len(gen)):
            c = "" if per_frame is None else repr(per_frame[t])
            w.writerow([t, repr(float(g_gen[t])), repr(float(g_ref[t])), repr(pd[t]), c])
    return 0


def cmd_control(args):
    _require(args, "embeddings", "landmarks", "out_embeddings")
    emb = np.array(load_embeddings(args.embeddings))
    track = load_landmarks(args.landmarks, args.scheme)
    if len(emb) != len(track):
        raise ValidationError(f"length mismatch: {len(emb)} embeddings vs {len(track)} landmark frames")
    ctrl = StructureController((args.lambda_min, args.lambda_max), args.epsilon_gamma, args.scheme)
    out = ctrl.fit_transform(emb, track)
    _log(f"control: anchor frame {ctrl.anchor_index_} (gamma {ctrl.state_.anchor_gamma:.6g})")
    store_embeddings(out, args.out_embeddings)
    csv_path = args.out_csv or os.path.splitext(args.out_embeddings)[0] + ".csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "gamma", "lambda"])
        for t, g in enumerate(ctrl.gammas_):
            lam = "" if t == 0 else repr(float(ctrl.lambdas_[t - 1]))
            w.writerow([t, repr(float(g)), lam])
    return 0


def cmd_mix(args):
    _require(args, "model", "lip_params", "id_params", "out_params", "out_landmarks")
    model = load_model(args.model)
    lip, ident = load_params(args.lip_params), load_params(args.id_params)
    mixed = mix_parameters(lip, ident)
    shape, _ = synthesize(model, mixed)
    if not model.landmark_indices:
        raise ValidationError("model has no landmark indices to project")
    pts = project_landmarks(shape, model)
    _ensure_parent(args.out_params)
    store_params(mixed, args.out_params)
    _ensure_parent(args.out_landmarks)
    store_landmarks(LandmarkTrack(pts[None], scheme=args.scheme), args.out_landmarks)
    return 0


def cmd_fixture(args):
    _require(args, "kind", "out")
    params = {}
    for item in args.param or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects key=value, got {item!r}")
        try:
            params[key] = json.loads(value)
        except json.JSONDecodeError:
            params[key] = value
    try:
        manifest = make_fixture(FixtureSpec(args.kind, args.seed, params), args.out)
    except TypeError as exc:
        raise UsageError(f"bad --param for fixture {args.kind!r}: {exc}") from None
    _log(f"fixture: wrote {args.kind} to {args.out} ({len(manifest['assets'])} assets)")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="talkstab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"talkstab {__version__}")
    parser.add_argument("--config", help="JSON file with default flag values")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help=argparse.SUPPRESS)
        p.add_argument("--stamp", action="store_true", help="add a UTC timestamp to JSON reports")
        p.set_defaults(func=func)
        return p

    p = command("flow", cmd_flow, "dense optical flow for consecutive frame pairs")
    p.add_argument("--frames", help="frame glob, directory or printf pattern")
    p.add_argument("--out", help="output directory for flow_%%05d.flo")
    fp = FlowParams()
    p.add_argument("--regularization", type=float, default=fp.regularization)
    p.add_argument("--iterations", type=int, default=fp.iterations)
    p.add_argument("--levels", type=int, default=fp.levels)
    p.add_argument("--threads", type=int, default=0, help="worker threads (0 = TALKSTAB_THREADS or auto)")

    p = command("sense", cmd_sense, "noise pattern and normality report of generated vs reference flow")
    p.add_argument("--fake-flow", help="directory of generated-video .flo files")
    p.add_argument("--real-flow", help="directory of reference-video .flo files")
    p.add_argument("--mask", help="P5 region mask")
    p.add_argument("--min-samples", type=int, default=DEFAULT_MIN_SAMPLES)
    p.add_argument("--out-pattern", help="output .flo for the D map")
    p.add_argument("--out-report", help="output JSON report")

    p = command("stabilize", cmd_stabilize, "noise-adaptive temporal filtering of a frame sequence")
    p.add_argument("--frames")
    p.add_argument("--pattern", help="noise pattern .flo written by `sense`")
    p.add_argument("--mask")
    p.add_argument("--half-width", type=int, default=DEFAULT_HALF_WIDTH, help="kernel half-width K")
    p.add_argument("--out", help="output frame directory")

    p = command("eval", cmd_eval, "PD, CSLD, PCLD and optional CPBD/MNP for a generated clip")
    p.add_argument("--gen-landmarks")
    p.add_argument("--ref-landmarks")
    p.add_argument("--gen-frames")
    p.add_argument("--noise-pattern", help="optional D map for the MNP entry")
    p.add_argument("--mask")
    p.add_argument("--scheme", default="ibug68")
    p.add_argument("--pd-points", choices=("lips", "all"), default="lips")
    p.add_argument("--no-scale", action="store_true", help="rigid PD: remove translation and rotation only")
    p.add_argument("--out-report")
    p.add_argument("--out-csv")

    p = command("control", cmd_control, "lip-distance driven embedding refinement")
    p.add_argument("--embeddings")
    p.add_argument("--landmarks")
    p.add_argument("--scheme", default="ibug68")
    p.add_argument("--lambda-min", type=float, default=DEFAULT_LAMBDA_BOUNDS[0])
    p.add_argument("--lambda-max", type=float, default=DEFAULT_LAMBDA_BOUNDS[1])
    p.add_argument("--epsilon-gamma", type=float, default=DEFAULT_EPSILON_GAMMA)
    p.add_argument("--out-embeddings")
    p.add_argument("--out-csv")

    p = command("mix", cmd_mix, "combine lip shape and identity texture coefficients")
    p.add_argument("--model")
    p.add_argument("--lip-params")
    p.add_argument("--id-params")
    p.add_argument("--scheme", default="inner6", help="scheme tag written with the landmarks")
    p.add_argument("--out-params")
    p.add_argument("--out-landmarks")

    p = command("fixture", cmd_fixture, "generate a synthetic test asset")
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", metavar="KEY=JSON")
    p.add_argument("--out")
    return parser


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        with open(known.config) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{known.config}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{known.config}: config must be a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    flat = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
    all_dests = set()
    for name, p in subparsers.items():
        dests = {a.dest for a in p._actions}
        all_dests |= dests
        nested = doc.get(name, {})
        nested = {k.replace("-", "_"): v for k, v in nested.items()} if isinstance(nested, dict) else {}
        unknown = set(nested) - dests
        if unknown:
            raise UsageError(f"unknown config key(s) for {name}: {', '.join(sorted(unknown))}")
        p.set_defaults(**{k: v for k, v in flat.items() if k in dests}, **nested)
    unknown = set(flat) - all_dests
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except FormatError as exc:
        _log(f"error: {exc}")
        return 1
    except OSError as exc:
        _log(f"error: {exc}")
        return 1
    except ValidationError as exc:
        _log(f"error: {exc}")
        return 2
    try:
        return args.func(args)
    except ValidationError as exc:
        _log(f"error: {exc}")
        return 2
    except (FormatError, OSError) as exc:
        _log(f"error: {exc}")
        return 1
    except TalkstabError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
