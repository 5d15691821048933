"""Command-line entry point.

Subcommands: train, infer, eval, gradcheck, synth, bench-scan.
Exit codes: 0 success, 1 usage error, 2 verification failure,
3 I/O error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_IMAGE_EXTS = (".png", ".ppm", ".pnm")


class _UsageExit(Exception):
    def __init__(self, message):
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures raise instead of sys.exit(2)."""

    def error(self, message):
        raise _UsageExit(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    p = _Parser(prog="msmamba", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")

    t = sub.add_parser("train", help="run the training loop from a JSON config")
    t.add_argument("--config", required=True, help="path to a train config JSON file")
    t.add_argument("--resume", default="", help="checkpoint to continue from")
    t.add_argument("--progress-every", type=int, default=0, metavar="N",
                   help="print a progress line to stderr every N iterations")

    i = sub.add_parser("infer", help="restore every image in a directory")
    i.add_argument("--ckpt", required=True, help="trained checkpoint file")
    i.add_argument("--in", dest="in_dir", required=True, help="directory of degraded images")
    i.add_argument("--out", dest="out_dir", required=True, help="directory for restored images")

    e = sub.add_parser("eval", help="PSNR/SSIM of predictions against ground truth")
    e.add_argument("--pred", required=True, help="directory of predicted images")
    e.add_argument("--gt", required=True, help="directory of ground-truth images")
    e.add_argument("--channel", choices=("y", "rgb"), default="y",
                   help="metric protocol: luma plane or full RGB")

    g = sub.add_parser("gradcheck", help="run the self-verification suite")
    g.add_argument("--module", default="all",
                   choices=("all", "ssm", "blocks", "losses", "network"),
                   help="which check group to run")

    s = sub.add_parser("synth", help="write synthetic degradations of clean images")
    s.add_argument("--kind", required=True,
                   choices=("noise", "rain", "haze", "lowlight"))
    s.add_argument("--params", nargs="*", default=[], metavar="k=v",
                   help="generator parameters, e.g. sigma=0.098")
    s.add_argument("--in", dest="in_dir", required=True, help="directory of clean images")
    s.add_argument("--out", dest="out_dir", required=True,
                   help="directory for degraded images + manifest")
    s.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench-scan", help="sequential vs chunked scan throughput")
    b.add_argument("--L", type=int, default=4096, help="sequence length")
    b.add_argument("--threads", type=int, default=1, help="max worker threads to sweep")
    return p


def _list_images(d: str):
    try:
        names = sorted(os.listdir(d))
    except OSError as e:
        raise IOError(f"cannot list {d}: {e.strerror}") from e
    return [n for n in names if n.lower().endswith(_IMAGE_EXTS)]


def _parse_kv(pairs):
    out = {}
    for pair in pairs:
        key, sep, val = pair.partition("=")
        if not sep or not key:
            raise _UsageExit(f"--params entries must look like k=v, got {pair!r}")
        try:
            num = float(val)
            out[key] = int(num) if num.is_integer() and "." not in val else num
        except ValueError:
            raise _UsageExit(f"--params value for {key!r} is not numeric: {val!r}")
    return out


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_train(args) -> int:
    from . import data, trainer
    from .config import load_train_config
    from .network import build_network

    cfg = load_train_config(args.config)
    manifest = cfg.data_manifest
    if manifest and not os.path.isabs(manifest):
        manifest = os.path.join(os.path.dirname(os.path.abspath(args.config)), manifest)
    if not manifest:
        raise _UsageExit("train config must set data_manifest")
    samples = data.load_manifest_samples(manifest)
    net = build_network(cfg.network, seed=cfg.seed)
    records = trainer.train_loop(
        net, samples, cfg, resume=args.resume,
        progress_every=args.progress_every,
    )
    last = records[-1] if records else None
    if last is not None:
        print(f"trained {len(records)} iterations; "
              f"final total {last.total:.6f}, batch psnr {last.psnr:.2f} dB")
    print(f"checkpoints and metrics in {cfg.out_dir}")
    return EXIT_OK


def _cmd_infer(args) -> int:
    from . import data, trainer
    from .config import parse_train_config
    from .network import build_network
    from .tensor import Tensor, no_grad

    ck = trainer.load_checkpoint(args.ckpt)
    cfg = parse_train_config(ck.config_json)
    net = build_network(cfg.network, seed=cfg.seed)
    trainer.restore_parameters(net, ck.params)
    names = _list_images(args.in_dir)
    if not names:
        raise IOError(f"no images (png/ppm) found in {args.in_dir}")
    os.makedirs(args.out_dir, exist_ok=True)
    for name in names:
        img = data.load_image(os.path.join(args.in_dir, name))
        x = Tensor(img[None].astype(cfg.network.np_dtype))
        with no_grad():
            restored = net(x).data[0]
        data.save_image(restored, os.path.join(args.out_dir, name))
        print(f"restored {name}")
    return EXIT_OK


def _fmt_metric(v: float) -> str:
    return "inf" if v == float("inf") else f"{v:.4f}"


def _cmd_eval(args) -> int:
    from . import data, metrics

    pred_names = _list_images(args.pred)
    gt_names = set(_list_images(args.gt))
    common = [n for n in pred_names if n in gt_names]
    if not common:
        raise IOError(f"no filenames shared between {args.pred} and {args.gt}")
    rows = []
    for name in common:
        p = data.load_image(os.path.join(args.pred, name))
        g = data.load_image(os.path.join(args.gt, name))
        ps, ss = metrics.evaluate_pair(p, g, channel=args.channel)
        rows.append((name, ps, ss))
    width = max(len(n) for n, _, _ in rows + [("mean", 0, 0)])
    print(f"{'image':<{width}}  {'psnr':>9}  {'ssim':>7}")
    for name, ps, ss in rows:
        print(f"{name:<{width}}  {_fmt_metric(ps):>9}  {ss:>7.4f}")
    finite = [ps for _, ps, _ in rows if ps != float("inf")]
    mean_psnr = float("inf") if not finite else sum(finite) / len(finite)
    mean_ssim = sum(ss for _, _, ss in rows) / len(rows)
    print(f"{'mean':<{width}}  {_fmt_metric(mean_psnr):>9}  {mean_ssim:>7.4f}")
    for name, ps, ss in rows:
        print(f"{name}\t{_fmt_metric(ps)}\t{ss:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .verification import run_checks

    ok, results = run_checks(args.module)
    for name, good, detail in results:
        print(f"[{'ok' if good else 'FAIL'}] {name}: {detail}")
    print(f"{sum(1 for _, g, _ in results if g)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_VERIFY


def _cmd_synth(args) -> int:
    from . import data

    params = _parse_kv(args.params)
    names = _list_images(args.in_dir)
    if not names:
        raise IOError(f"no images (png/ppm) found in {args.in_dir}")
    os.makedirs(args.out_dir, exist_ok=True)
    records = []
    for n, name in enumerate(names):
        clean_path = os.path.join(os.path.abspath(args.in_dir), name)
        clean = data.load_image(clean_path)
        seed = args.seed + n
        sample = data.synthesize(clean, args.kind, params, seed)
        data.save_image(sample.degraded, os.path.join(args.out_dir, name))
        rec_params = dict(sample.degradation.params)
        rec_params["seed"] = seed
        stem = os.path.splitext(name)[0]
        # manifest paths resolve relative to the manifest itself, so point
        # back at the clean source, not the degraded copy next to it
        rel_clean = os.path.relpath(clean_path, os.path.abspath(args.out_dir))
        records.append((stem, rel_clean, args.kind, rec_params))
        print(f"degraded {name} ({args.kind})")
    data.write_manifest(os.path.join(args.out_dir, "manifest.tsv"), records)
    print(f"manifest: {os.path.join(args.out_dir, 'manifest.tsv')}")
    return EXIT_OK


def _cmd_bench_scan(args) -> int:
    from .verification import bench_scan

    rows = bench_scan(L=args.L, threads=args.threads)
    print(f"{'threads':>7}  {'seq el/s':>12}  {'chunked el/s':>12}  {'max |dev|':>10}")
    for t, seq_eps, chunk_eps, dev in rows:
        print(f"{t:>7}  {seq_eps:>12.3e}  {chunk_eps:>12.3e}  {dev:>10.2e}")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
    "bench-scan": _cmd_bench_scan,
}


def main(argv=None) -> int:
    from .config import ConfigError
    from .tensor import ContractViolation
    from .trainer import NumericAbort

    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return _COMMANDS[args.command](args)
    except _UsageExit as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # argparse --help exits 0 through here
        return e.code if isinstance(e.code, int) else 0
    except (ConfigError, ContractViolation) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:  # covers image and checkpoint I/O failures
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
