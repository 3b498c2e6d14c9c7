"""Smoke test for the `sdetr` Python module.

Build the extension first:

    cargo build --release -p sdetr-py --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built
library next to a temporary `sdetr.so` and imports it from there.
"""

import importlib
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_sdetr(workdir):
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libsdetr.so")
        if os.path.exists(lib):
            shutil.copy(lib, os.path.join(workdir, "sdetr.so"))
            sys.path.insert(0, workdir)
            return importlib.import_module("sdetr")
    sys.exit("libsdetr.so not found; build with "
             "`cargo build --release -p sdetr-py --features extension-module`")


def main():
    work = tempfile.mkdtemp(prefix="sdetr-smoke-")
    try:
        sdetr = import_sdetr(work)

        assert abs(sdetr.iou((0, 0, 2, 2), (1, 0, 3, 2)) - 1 / 3) < 1e-6
        assert sdetr.giou((0, 0, 1, 1), (2, 0, 3, 1)) < 0
        assert sdetr.hungarian([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]]) == [1, 0]

        cfg = sdetr.RunConfig(overrides=[
            "view.size=64", "detect.size=64", "data.width=96", "data.height=96",
            "pretrain.epochs=1", "pretrain.decay_epoch=0",
            "finetune.epochs=2", "finetune.decay_epoch=1",
        ])
        cfg.validate()
        assert cfg.get("view.tau") == "0.5"
        try:
            cfg.set("no.such.key", "1")
        except sdetr.SdetrError as e:
            assert "no.such.key" in str(e)
        else:
            raise AssertionError("unknown key accepted")

        manifest = sdetr.generate(12, os.path.join(work, "data"), cfg)
        samples = sdetr.load_samples(manifest)
        assert len(samples) == 12 and all(s["boxes"] for s in samples)

        pair = sdetr.view_pair(manifest, 0, 7, cfg)
        assert pair["iou"] >= 0.5
        assert len(pair["proposals1"]) == len(pair["proposals2"]) == 10

        records = sdetr.pretrain(manifest, os.path.join(work, "pre"), cfg)
        assert records and all(r["total"] == r["total"] for r in records)
        ckpt = os.path.join(work, "pre", "pretrain_epoch001.sdtr")

        det = sdetr.finetune(manifest, ckpt, cfg)
        out = os.path.join(work, "det.sdtr")
        det.save(out)
        again = sdetr.Detector.load(out, cfg)
        assert again.num_parameters() == det.num_parameters()
        dets = again.detect(manifest)
        assert len(dets) == 12 * 10
        assert all(0.0 <= d["score"] <= 1.0 for d in dets)
        report = again.evaluate(manifest)
        assert set(report) == {"ap", "ap50", "ap75", "ar1", "ar10"}
        print("sdetr smoke test ok:", {k: round(v, 4) for k, v in report.items()})
    finally:
        shutil.rmtree(work, ignore_errors=True)


if __name__ == "__main__":
    main()
