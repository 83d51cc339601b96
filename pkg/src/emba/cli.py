"""Command-line pipeline: ``refine``, ``simulate``, ``evaluate`` and ``reconstruct``.

Configuration comes from built-in defaults, then an optional ``key = value``
file (``--config``), then command-line flags. Every run that has an output
directory writes ``manifest.txt`` with the fully resolved configuration; the
manifest can be passed back through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .events import NoTermsError, read_events, write_events
from .geometry import CameraModel
from .mapio import (
    MapFormatError,
    intensity_to_u16,
    read_gradient_map,
    write_gradient_map,
    write_pfm,
    write_pgm,
)
from .metrics import align_at, are_rmse, metrics_dict, metrics_json, metrics_text, photometric_error
from .normal_equations import SOLVERS
from .panorama import MAX_MAP_HEIGHT, MAX_MAP_WIDTH, NoValidPixelsError, poisson_reconstruct
from .simulator import (
    SimConfig,
    TimeStepTooLargeError,
    inject_spurious_events,
    pan_trajectory,
    perturb_trajectory,
    procedural_panorama,
    simulate_events,
    true_gradient_map,
)
from .solver import Problem, SolverConfig, optimize
from .trajectory import TrajectorySpanError, read_trajectory, write_trajectory

logger = logging.getLogger("emba")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2


class InputError(Exception):
    """Bad configuration or unreadable input; maps to exit status 1."""


def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default). Paths and intrinsics default to None.
OPTIONS = {
    # inputs / outputs
    "events": (str, None),
    "trajectory": (str, None),
    "reference": (str, None),
    "init_map": (str, None),
    "out": (str, None),
    # solver (defaults follow the published settings)
    "contrast": (float, 0.2),
    "eta": (float, 5.0),
    "pose_rate": (float, 20.0),
    "map_width": (int, 1024),
    "map_height": (int, 512),
    "valid_threshold": (int, 5),
    "huber": (_parse_bool, False),
    "huber_delta": (float, 0.1),
    "solver": (str, "schur"),
    "lambda0": (float, 1e-3),
    "lambda_up": (float, 10.0),
    "lambda_down": (float, 10.0),
    "max_iters": (int, 50),
    "tol": (float, 1e-6),
    "threads": (int, 1),
    # sensor
    "sensor_width": (int, 128),
    "sensor_height": (int, 128),
    "hfov_deg": (float, 60.0),
    "fx": (float, None),
    "fy": (float, None),
    "cx": (float, None),
    "cy": (float, None),
    # simulation
    "seed": (int, 0),
    "duration": (float, 3.0),
    "sim_dt": (float, 1e-3),
    "yaw_rate_deg": (float, 25.0),
    "wobble_deg": (float, 1.0),
    "amplitude": (float, 0.8),
    "max_freq": (int, 24),
    "init_noise_deg": (float, 1.0),
    "spurious_fraction": (float, 0.0),
    "event_format": (str, "txt"),
}

PATH_KEYS = ("events", "trajectory", "reference", "init_map", "out")


class RunConfig:
    """Resolved configuration; options are readable as attributes."""

    def __init__(self, values):
        self.values = dict(values)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @classmethod
    def resolve(cls, file_values=None, cli_values=None):
        values = {k: default for k, (_, default) in OPTIONS.items()}
        for source in (file_values or {}, cli_values or {}):
            for k, v in source.items():
                if v is not None:
                    values[k] = v
        for k in PATH_KEYS:
            if values[k] is not None:
                values[k] = os.path.abspath(values[k])
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self):
        v = self.values
        checks = [
            (v["contrast"] > 0, "contrast must be positive"),
            (v["eta"] >= 0, "eta must be non-negative"),
            (v["pose_rate"] > 0, "pose_rate must be positive"),
            (2 <= v["map_width"] <= MAX_MAP_WIDTH, f"map_width must be in [2, {MAX_MAP_WIDTH}]"),
            (2 <= v["map_height"] <= MAX_MAP_HEIGHT, f"map_height must be in [2, {MAX_MAP_HEIGHT}]"),
            (v["valid_threshold"] >= 0, "valid_threshold must be non-negative"),
            (v["huber_delta"] > 0, "huber_delta must be positive"),
            (v["solver"] in SOLVERS, f"solver must be one of {sorted(SOLVERS)}"),
            (v["lambda0"] > 0, "lambda0 must be positive"),
            (v["lambda_up"] > 1 and v["lambda_down"] > 1, "lambda factors must exceed 1"),
            (v["max_iters"] >= 0, "max_iters must be non-negative"),
            (v["tol"] >= 0, "tol must be non-negative"),
            (v["threads"] >= 1, "threads must be at least 1"),
            (v["sensor_width"] > 0 and v["sensor_height"] > 0, "sensor size must be positive"),
            (0 < v["hfov_deg"] < 180, "hfov_deg must be in (0, 180)"),
            (all(v[k] is None or v[k] > 0 for k in ("fx", "fy")), "focal lengths must be positive"),
            (v["duration"] > 0, "duration must be positive"),
            (v["sim_dt"] > 0, "sim_dt must be positive"),
            (v["wobble_deg"] >= 0, "wobble_deg must be non-negative"),
            (v["amplitude"] >= 0, "amplitude must be non-negative"),
            (v["max_freq"] >= 1, "max_freq must be at least 1"),
            (v["init_noise_deg"] >= 0, "init_noise_deg must be non-negative"),
            (0 <= v["spurious_fraction"] < 1, "spurious_fraction must be in [0, 1)"),
            (v["event_format"] in ("txt", "bin"), "event_format must be 'txt' or 'bin'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InputError(msg)

    def solver_config(self):
        v = self.values
        return SolverConfig(
            contrast=v["contrast"],
            eta=v["eta"],
            pose_rate=v["pose_rate"],
            map_width=v["map_width"],
            map_height=v["map_height"],
            valid_threshold=v["valid_threshold"],
            huber=v["huber"],
            huber_delta=v["huber_delta"],
            lambda0=v["lambda0"],
            lambda_up=v["lambda_up"],
            lambda_down=v["lambda_down"],
            max_iters=v["max_iters"],
            tol=v["tol"],
            solver=v["solver"],
            threads=v["threads"],
        )

    def camera(self):
        v = self.values
        w, h = v["sensor_width"], v["sensor_height"]
        base = CameraModel.from_fov(w, h, v["hfov_deg"])
        fx = base.fx if v["fx"] is None else v["fx"]
        fy = fx if v["fy"] is None else v["fy"]
        cx = base.cx if v["cx"] is None else v["cx"]
        cy = base.cy if v["cy"] is None else v["cy"]
        return CameraModel(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]), w, h)

    def manifest_text(self, command):
        lines = [f"# emba {__version__} {command}"]
        for k in OPTIONS:
            val = self.values[k]
            if val is None:
                continue
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{k} = {val}")
        return "\n".join(lines) + "\n"


def parse_config_file(path):
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise InputError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (part.strip() for part in s.split("=", 1))
            key = key.replace("-", "_")
            if key not in OPTIONS:
                raise InputError(f"{path}:{lineno}: unknown key {key!r}")
            parser = OPTIONS[key][0]
            try:
                out[key] = parser(val)
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="emba",
        description="Event-based mosaicing bundle adjustment for rotating event cameras.",
    )
    parser.add_argument("--version", action="version", version=f"emba {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file (CLI flags override it)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--events", help="event file (text 't x y p' or EVT1 binary)")
        p.add_argument("--trajectory", help="trajectory file 't qw qx qy qz'")
        p.add_argument("--reference", help="reference trajectory for evaluation")
        p.add_argument("--init-map", dest="init_map", help="gradient map prefix/.gx.pfm, or an intensity PFM/PGM")
        p.add_argument("--contrast", type=float, help="contrast threshold C (default 0.2)")
        p.add_argument("--eta", type=float, help="map regularization weight (default 5.0)")
        p.add_argument("--pose-rate", dest="pose_rate", type=float, help="control-pose rate in Hz (default 20)")
        p.add_argument("--map-width", dest="map_width", type=int, help="panorama width (default 1024)")
        p.add_argument("--map-height", dest="map_height", type=int, help="panorama height (default 512)")
        p.add_argument("--huber", action=argparse.BooleanOptionalAction, default=None, help="use the Huber loss")
        p.add_argument("--huber-delta", dest="huber_delta", type=float, help="Huber threshold (default 0.1)")
        p.add_argument("--solver", choices=sorted(SOLVERS), help="linear solver (default schur)")
        p.add_argument("--max-iters", dest="max_iters", type=int, help="LM iteration cap (default 50)")
        p.add_argument("--threads", type=int, help="worker threads; 1 is fully sequential (default)")
        p.add_argument("--seed", type=int, help="random seed for simulation (default 0)")

    for name, text in (
        ("refine", "jointly refine a trajectory and gradient map"),
        ("simulate", "simulate events over a procedural panorama"),
        ("evaluate", "rotation and photometric error of an estimate"),
        ("reconstruct", "Poisson-reconstruct intensity from gradient maps"),
    ):
        common(sub.add_parser(name, help=text, description=text))
    return parser


def _configure_logging():
    level_name = os.environ.get("EMBA_LOG", "WARNING").strip().upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        try:
            level = int(level_name)
        except ValueError:
            level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _require(path, what):
    if path is None:
        raise InputError(f"--{what} is required")
    if not os.path.exists(path):
        raise InputError(f"{what} file not found: {path}")
    return path


def _require_map(path):
    """Like ``_require`` but also accepts a ``.gx.pfm``/``.gy.pfm`` prefix."""
    if path is None:
        raise InputError("--init-map is required")
    if not (os.path.exists(path) or os.path.exists(f"{path}.gx.pfm")):
        raise InputError(f"init-map file not found: {path}")
    return path


def _prepare_out(cfg: RunConfig, command, required=True):
    if cfg.out is None:
        if required:
            raise InputError("--out is required")
        return None
    try:
        os.makedirs(cfg.out, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {cfg.out}: {exc}") from None
    with open(os.path.join(cfg.out, "manifest.txt"), "w") as fh:
        fh.write(cfg.manifest_text(command))
    return cfg.out


def _load_trajectory(path, rate):
    try:
        return read_trajectory(path, rate=None)
    except ValueError:
        # non-uniform samples: resample on the control-pose grid
        return read_trajectory(path, rate=rate)


def _write_intensity(out, M, stem="intensity"):
    write_pfm(os.path.join(out, f"{stem}.pfm"), M)
    write_pgm(os.path.join(out, f"{stem}.pgm"), intensity_to_u16(M), maxval=65535)


def cmd_refine(cfg: RunConfig):
    _require(cfg.events, "events")
    _require(cfg.trajectory, "trajectory")
    out = _prepare_out(cfg, "refine")
    cam = cfg.camera()
    events = read_events(cfg.events)
    traj0 = read_trajectory(cfg.trajectory, rate=cfg.pose_rate)
    G0 = None
    if cfg.init_map is not None:
        _require_map(cfg.init_map)
        G0 = read_gradient_map(cfg.init_map)
        if (G0.width, G0.height) != (cfg.map_width, cfg.map_height):
            raise InputError(
                f"initial map is {G0.width}x{G0.height} but the map size is {cfg.map_width}x{cfg.map_height}"
            )
    logger.info("refining %d events, %d control poses", len(events), traj0.n_poses)
    scfg = cfg.solver_config()
    problem = Problem.from_initial(events, traj0, cam, scfg)
    traj, G, report = optimize(events, traj0, G0, cam, scfg, problem=problem)
    mask = problem.mask

    write_trajectory(os.path.join(out, "trajectory.txt"), traj)
    write_gradient_map(os.path.join(out, "map"), G)
    write_pgm(os.path.join(out, "mask.pgm"), mask.valid.astype(np.int64) * 255)
    _write_intensity(out, poisson_reconstruct(G, mask))
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    with open(os.path.join(out, "timing.txt"), "w") as fh:
        fh.write(report.timing_text())
    with open(os.path.join(out, "timing.json"), "w") as fh:
        json.dump(report.timing_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"status {report.status} initial_phe {report.initial_phe:.6g} final_phe {report.final_phe:.6g}")
    if not report.converged:
        logger.warning("optimization stopped without converging (%s)", report.status)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _seeds(seed, n):
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def cmd_simulate(cfg: RunConfig):
    out = _prepare_out(cfg, "simulate")
    cam = cfg.camera()
    s_map, s_traj, s_noise, s_spurious = _seeds(cfg.seed, 4)
    M = procedural_panorama(cfg.map_width, cfg.map_height, seed=s_map, amplitude=cfg.amplitude, max_freq=cfg.max_freq)
    gt = pan_trajectory(
        cfg.duration, cfg.pose_rate, seed=s_traj, yaw_rate_deg=cfg.yaw_rate_deg, wobble_deg=cfg.wobble_deg
    )
    try:
        events = simulate_events(SimConfig(cfg.contrast, cfg.sim_dt, cam, gt, M))
    except TimeStepTooLargeError as exc:
        raise InputError(str(exc)) from None
    if cfg.spurious_fraction > 0 and len(events):
        events = inject_spurious_events(events, cfg.spurious_fraction, cam, gt.t0, gt.t_end, seed=s_spurious)
    if len(events) == 0:
        logger.warning("the simulated trajectory produced no events")
    ext = "bin" if cfg.event_format == "bin" else "txt"
    write_events(os.path.join(out, f"events.{ext}"), events)
    write_trajectory(os.path.join(out, "trajectory_gt.txt"), gt)
    if cfg.init_noise_deg > 0:
        write_trajectory(os.path.join(out, "trajectory_init.txt"), perturb_trajectory(gt, cfg.init_noise_deg, seed=s_noise))
    write_pfm(os.path.join(out, "intensity_gt.pfm"), M)
    write_gradient_map(os.path.join(out, "gt"), true_gradient_map(M))
    print(f"events {len(events)} poses {gt.n_poses}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig):
    _require(cfg.trajectory, "trajectory")
    _require(cfg.reference, "reference")
    out = _prepare_out(cfg, "evaluate", required=False)
    est = _load_trajectory(cfg.trajectory, cfg.pose_rate)
    ref = _load_trajectory(cfg.reference, cfg.pose_rate)
    if not (np.all(ref.contains(est.times))):
        raise InputError(
            f"span mismatch: estimate covers [{est.t0}, {est.t_end}] but reference covers [{ref.t0}, {ref.t_end}]"
        )
    are = are_rmse(align_at(est, ref, est.t0), ref)
    phe = n_terms = n_dropped = None
    if cfg.events is not None or cfg.init_map is not None:
        _require(cfg.events, "events")
        _require_map(cfg.init_map)
        G = read_gradient_map(cfg.init_map)
        events = read_events(cfg.events)
        phe, n_terms, n_dropped = photometric_error(
            events, est, G, cfg.camera(), cfg.contrast, threshold=cfg.valid_threshold
        )
    d = metrics_dict(are, phe, n_terms, n_dropped)
    text = metrics_text(d)
    if out is not None:
        with open(os.path.join(out, "metrics.txt"), "w") as fh:
            fh.write(text)
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            fh.write(metrics_json(d) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig):
    _require_map(cfg.init_map)
    out = _prepare_out(cfg, "reconstruct")
    G = read_gradient_map(cfg.init_map)
    M = poisson_reconstruct(G)
    _write_intensity(out, M)
    print(f"intensity {G.width}x{G.height}")
    return EXIT_OK


COMMANDS = {
    "refine": cmd_refine,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
}


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    cli_values = {k: getattr(args, k) for k in OPTIONS if hasattr(args, k)}
    t0 = time.perf_counter()
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        cfg = RunConfig.resolve(file_values, cli_values)
        status = COMMANDS[args.command](cfg)
    except InputError as exc:
        print(f"emba: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"emba: error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (
        ValueError,
        MapFormatError,
        NoTermsError,
        NoValidPixelsError,
        TrajectorySpanError,
        OSError,
    ) as exc:
        print(f"emba: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logger.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    return status


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
