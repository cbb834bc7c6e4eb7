"""Command-line entry point: train, eval, ablate, gradcheck, gen-data."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from mhfpn import ablation, gradcheck
from mhfpn.boxes import Detection
from mhfpn.config import RunConfig, format_config, load_config
from mhfpn.data import save_annotations
from mhfpn.metrics import froc_to_csv, reports_to_csv
from mhfpn.model import load_checkpoint, save_checkpoint
from mhfpn.tensor import inject_fault
from mhfpn.train import build_model, evaluate_model, load_dataset, model_predictor, split_for, train

log = logging.getLogger("mhfpn")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: RunConfig, out: Path) -> None:
    text = format_config(cfg)
    (out / "config.txt").write_text(text, encoding="utf-8")
    log.info("resolved config:\n%s", text.rstrip())


def cmd_train(args) -> int:
    cfg, out = _config(args), _out(args)
    _write_config(cfg, out)
    tr, va, _ = split_for(cfg, load_dataset(cfg))
    model = build_model(cfg)
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_tpr"])

        def on_epoch(e):
            w.writerow([e.epoch, repr(e.loss), repr(e.val_tpr)])
            fh.flush()

        res = train(model, tr, va, cfg, on_epoch)
    model.load_state_dict(res.best_state)
    save_checkpoint(model, out / "model.ckpt")
    log.info("best epoch %d, checkpoint %s", res.best_epoch, out / "model.ckpt")
    return 0


def _oracle(images):
    return [[Detection(b, 1.0) for b in im.boxes] for im in images]


def _empty(images):
    return [[] for _ in images]


def cmd_eval(args) -> int:
    cfg, out = _config(args), _out(args)
    _write_config(cfg, out)
    _, _, te = split_for(cfg, load_dataset(cfg))
    model = build_model(cfg)
    if args.predictor == "model":
        if not args.checkpoint:
            raise SystemExit("eval: --checkpoint is required with --predictor model")
        load_checkpoint(model, args.checkpoint)
        predictor = model_predictor(model)
    else:
        predictor = _oracle if args.predictor == "oracle" else _empty
    rep = evaluate_model(model, te, cfg, predictor)
    name = args.name or cfg.neck.variant
    (out / "metrics.csv").write_text(reports_to_csv({name: rep}))
    (out / "froc.csv").write_text(froc_to_csv(rep.froc))
    print(reports_to_csv({name: rep}), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg, out = _config(args), _out(args)
    _write_config(cfg, out)
    variants = args.variants.split(",") if args.variants else ablation.ABLATION_ORDER
    res = ablation.run_ablation(cfg, variants, args.replicates)
    (out / "ablation.csv").write_text(ablation.summary_csv(res))
    (out / "ablation_max.csv").write_text(ablation.max_csv(res))
    (out / "ablation_raw.csv").write_text(ablation.raw_csv(res))
    print(ablation.summary_csv(res), end="")
    return 0


def cmd_gradcheck(args) -> int:
    faults = args.inject_fault or []
    with inject_fault(*faults):
        results = gradcheck.run_suite(points=args.points, seed=args.seed or 0)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.component:<28} worst {r.worst:.3e}  ({r.points} pts, {r.seconds:.2f}s)")
    print("all components passed" if ok else "gradient check FAILED")
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    cfg, out = _config(args), _out(args)
    if args.n is not None:
        cfg.data.n_images = args.n
    ds = load_dataset(cfg)
    save_annotations(ds, out / "annotations.json")
    print(f"wrote {len(ds)} images to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhfpn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="model and training seed override")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("train", help="train one model and keep the best validation checkpoint")
    common(sp, "runs/train")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate on the test split and write metrics/FROC CSVs")
    common(sp, "runs/eval")
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictor", choices=("model", "oracle", "empty"), default="model")
    sp.add_argument("--name", help="row label in metrics.csv (default: neck variant)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="train every neck variant over the replicates")
    common(sp, "runs/ablate")
    sp.add_argument("--variants", help="comma separated subset, e.g. FPN,MHFPN")
    sp.add_argument("--replicates", type=int, default=ablation.REPLICATES)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op and neck variant")
    common(sp, "runs/gradcheck")
    sp.add_argument("--points", type=int, default=10)
    sp.add_argument("--inject-fault", action="append", metavar="OP",
                    help="corrupt the adjoint of OP (testing hook; repeatable)")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("gen-data", help="write the synthetic dataset as PGM + JSON")
    common(sp, "runs/data")
    sp.add_argument("--n", type=int, help="number of images (default data.n_images)")
    sp.set_defaults(fn=cmd_gen_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
