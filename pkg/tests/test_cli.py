import json

import numpy as np
import pytest

from countforge.cli import main
from countforge.core import (
    AnnotatedImage,
    BoundingBox,
    DensityGrid,
    PointSet,
    save_grid,
    save_manifest,
)

from test_mosaic import synthetic_manifest


@pytest.fixture
def manifest_path(tmp_path):
    path = tmp_path / "manifest.json"
    save_manifest(synthetic_manifest(), path)
    return path


def make_support_image(tmp_path):
    """A small image whose 8x8 stride-4 density grid is easy to reason about."""
    img = AnnotatedImage(
        id="img0",
        width=32,
        height=32,
        class_label="c",
        points=PointSet([(16.0, 16.0), (8.0, 8.0)]),
        boxes=(BoundingBox(2, 2, 8, 8),),
    )
    path = tmp_path / "single.json"
    save_manifest([img], path)
    return img, path


class TestGenMosaic:
    def test_eval_expansion_and_determinism(self, tmp_path, manifest_path, capsys):
        out1 = tmp_path / "a.json"
        out2 = tmp_path / "b.json"
        argv = [
            "gen-mosaic", "--manifest", str(manifest_path), "--n-queries", "5",
            "--mode", "eval", "--seed", "9",
        ]
        assert main(argv + ["--out", str(out1)]) == 0
        assert main(argv + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        payload = json.loads(out1.read_text())
        assert len(payload["pairs"]) == 20
        captured = capsys.readouterr().out
        assert "pairs: 20" in captured
        assert "histogram" in captured

    def test_csv_companion(self, tmp_path, manifest_path):
        out = tmp_path / "m.json"
        csv_out = tmp_path / "m.csv"
        rc = main([
            "gen-mosaic", "--manifest", str(manifest_path), "--n-queries", "2",
            "--seed", "1", "--out", str(out), "--csv", str(csv_out),
        ])
        assert rc == 0
        assert csv_out.read_text().startswith("pair_id,target_class,gt_count")

    def test_malformed_manifest_exit_2_no_output(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        out = tmp_path / "out.json"
        rc = main([
            "gen-mosaic", "--manifest", str(bad), "--n-queries", "2",
            "--seed", "1", "--out", str(out),
        ])
        assert rc == 2
        assert not out.exists()

    def test_train_mode_one_pair_per_query(self, tmp_path, manifest_path):
        out = tmp_path / "train.json"
        rc = main([
            "gen-mosaic", "--manifest", str(manifest_path), "--n-queries", "7",
            "--mode", "train", "--seed", "3", "--out", str(out),
        ])
        assert rc == 0
        assert len(json.loads(out.read_text())["pairs"]) == 7


class TestEvalMetrics:
    def write_inputs(self, tmp_path, preds, gts):
        pred_csv = tmp_path / "pred.csv"
        gt_csv = tmp_path / "gt.csv"
        pred_csv.write_text("id,pred\n" + "".join(f"{i},{p}\n" for i, p in preds))
        gt_csv.write_text("id,gt\n" + "".join(f"{i},{g}\n" for i, g in gts))
        return pred_csv, gt_csv

    def test_hand_fixture(self, tmp_path):
        pred_csv, gt_csv = self.write_inputs(
            tmp_path, [("a", 12.0), ("b", 24.0)], [("a", 10), ("b", 20)]
        )
        out = tmp_path / "report.json"
        rc = main([
            "eval-metrics", "--pred", str(pred_csv), "--gt", str(gt_csv),
            "--out", str(out),
        ])
        assert rc == 0
        report = json.loads(out.read_text())["metrics"]
        assert report["mae"] == pytest.approx(3.0)
        assert report["nae"] == pytest.approx(0.2)

    def test_exclusion_and_bins(self, tmp_path):
        pred_csv, gt_csv = self.write_inputs(
            tmp_path,
            [("big", 1500.0), ("s1", 12.0), ("s2", 9.0)],
            [("big", 1000), ("s1", 10), ("s2", 10)],
        )
        out = tmp_path / "report.json"
        hist = tmp_path / "hist.csv"
        rc = main([
            "eval-metrics", "--pred", str(pred_csv), "--gt", str(gt_csv),
            "--exclude-top", "1", "--bins", "5", "--out", str(out),
            "--hist-csv", str(hist),
        ])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert payload["exclusion"]["dropped_ids"] == ["big"]
        assert payload["exclusion"]["full"]["rmse"] == pytest.approx(288.68, abs=0.005)
        assert len(payload["distribution"]) == 5
        assert hist.read_text().startswith("bin_low,bin_high,count")

    def test_missing_prediction_exit_2(self, tmp_path):
        pred_csv, gt_csv = self.write_inputs(
            tmp_path, [("a", 1.0)], [("a", 2), ("b", 3)]
        )
        assert main(["eval-metrics", "--pred", str(pred_csv), "--gt", str(gt_csv)]) == 2

    def test_zero_gt_exit_3(self, tmp_path):
        pred_csv, gt_csv = self.write_inputs(
            tmp_path, [("a", 1.0), ("z", 0.5)], [("a", 2), ("z", 0)]
        )
        assert main(["eval-metrics", "--pred", str(pred_csv), "--gt", str(gt_csv)]) == 3

    def test_manifest_ground_truth(self, tmp_path):
        img, manifest = make_support_image(tmp_path)
        pred_csv = tmp_path / "pred.csv"
        pred_csv.write_text("id,pred\nimg0,2.0\n")
        out = tmp_path / "report.json"
        rc = main([
            "eval-metrics", "--pred", str(pred_csv), "--manifest", str(manifest),
            "--out", str(out),
        ])
        assert rc == 0
        assert json.loads(out.read_text())["metrics"]["mae"] == 0.0


class TestGlLoss:
    def test_rendered_density_beats_uniform(self, tmp_path):
        # paired run at a marginal weight where transport is active: with
        # tau below min(C) the optimum abandons the dot marginal entirely
        # and the uniform layout wins on the quadratic term alone
        from countforge.core import render_gaussian_density

        img, manifest = make_support_image(tmp_path)
        good = render_gaussian_density(img.points, 8, 8, stride=4, sigma=1.0)
        uniform = DensityGrid(np.full((8, 8), 2.0 / 64.0), stride=4)
        losses = {}
        for name, grid in (("good", good), ("uniform", uniform)):
            dpath = tmp_path / f"{name}.json"
            save_grid(grid, dpath)
            out = tmp_path / f"{name}_loss.json"
            rc = main([
                "gl-loss", "--density", str(dpath), "--manifest", str(manifest),
                "--image-id", "img0", "--tau", "3.0", "--out", str(out),
            ])
            assert rc == 0
            losses[name] = json.loads(out.read_text())["loss"]
        assert losses["good"] < losses["uniform"]

    def test_empty_points_zero_density(self, tmp_path):
        img = AnnotatedImage(
            id="empty", width=32, height=32, class_label="c",
            points=PointSet([]), boxes=(),
        )
        manifest = tmp_path / "m.json"
        save_manifest([img], manifest)
        dpath = tmp_path / "zero.json"
        save_grid(DensityGrid(np.zeros((8, 8)), stride=4), dpath)
        out = tmp_path / "loss.json"
        rc = main([
            "gl-loss", "--density", str(dpath), "--manifest", str(manifest),
            "--image-id", "empty", "--out", str(out),
        ])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert payload["loss"] == 0.0
        assert payload["count"] == 0.0

    def test_default_overrides_equal_no_override(self, tmp_path):
        img, manifest = make_support_image(tmp_path)
        from countforge.core import render_gaussian_density

        grid = render_gaussian_density(img.points, 8, 8, stride=4, sigma=1.0)
        dpath = tmp_path / "d.json"
        save_grid(grid, dpath)
        outs = []
        for extra in ([], ["--epsilon", "0.01", "--tau", "0.5", "--eta", "0.6"]):
            out = tmp_path / f"out{len(outs)}.json"
            rc = main([
                "gl-loss", "--density", str(dpath), "--manifest", str(manifest),
                "--image-id", "img0", "--out", str(out), *extra,
            ])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_dimension_mismatch_exit_2(self, tmp_path):
        img, manifest = make_support_image(tmp_path)
        dpath = tmp_path / "d.json"
        save_grid(DensityGrid(np.zeros((5, 5)), stride=4), dpath)
        rc = main([
            "gl-loss", "--density", str(dpath), "--manifest", str(manifest),
            "--image-id", "img0",
        ])
        assert rc == 2

    def test_nonconvergence_exit_4_with_output(self, tmp_path):
        img, manifest = make_support_image(tmp_path)
        from countforge.core import render_gaussian_density

        grid = render_gaussian_density(img.points, 8, 8, stride=4, sigma=1.0)
        dpath = tmp_path / "d.json"
        save_grid(grid, dpath)
        out = tmp_path / "partial.json"
        rc = main([
            "gl-loss", "--density", str(dpath), "--manifest", str(manifest),
            "--image-id", "img0", "--max-iters", "1", "--tol", "1e-15",
            "--out", str(out),
        ])
        assert rc == 4
        assert json.loads(out.read_text())["converged"] is False


class TestRenderDensity:
    def test_render_feeds_gl_loss(self, tmp_path):
        img, manifest = make_support_image(tmp_path)
        dpath = tmp_path / "rendered.json"
        rc = main([
            "render-density", "--manifest", str(manifest), "--image-id", "img0",
            "--stride", "4", "--sigma", "1.0", "--out", str(dpath),
        ])
        assert rc == 0
        payload = json.loads(dpath.read_text())
        assert payload["height"] == 8 and payload["width"] == 8
        assert sum(payload["values"]) == pytest.approx(2.0, abs=1e-9)
        rc = main([
            "gl-loss", "--density", str(dpath), "--manifest", str(manifest),
            "--image-id", "img0",
        ])
        assert rc == 0

    def test_unknown_image_exit_2(self, tmp_path):
        _, manifest = make_support_image(tmp_path)
        rc = main([
            "render-density", "--manifest", str(manifest), "--image-id", "nope",
            "--out", str(tmp_path / "x.json"),
        ])
        assert rc == 2


class TestTtnPlan:
    def write_query(self, tmp_path, box_size):
        img = AnnotatedImage(
            id="q", width=768, height=768, class_label="c",
            points=PointSet([]),
            boxes=(BoundingBox(0, 0, box_size, box_size),) * 3,
        )
        path = tmp_path / "q.json"
        save_manifest([img], path)
        return path

    def test_small_boxes_64_tiles(self, tmp_path):
        manifest = self.write_query(tmp_path, 10)
        out = tmp_path / "plan.json"
        rc = main([
            "ttn-plan", "--manifest", str(manifest), "--image-id", "q",
            "--out", str(out),
        ])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert payload["normalize"] is True
        assert len(payload["tiles"]) == 64

    def test_large_boxes_single_tile(self, tmp_path):
        manifest = self.write_query(tmp_path, 100)
        out = tmp_path / "plan.json"
        rc = main([
            "ttn-plan", "--manifest", str(manifest), "--image-id", "q",
            "--out", str(out),
        ])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert payload["normalize"] is False
        assert payload["tiles"] == [[0, 0, 768, 768]]

    def test_m_override_identity(self, tmp_path):
        manifest = self.write_query(tmp_path, 10)
        out = tmp_path / "plan.json"
        rc = main([
            "ttn-plan", "--manifest", str(manifest), "--image-id", "q",
            "--tiles-M", "1", "--out", str(out),
        ])
        assert rc == 0
        assert json.loads(out.read_text())["tiles"] == [[0, 0, 768, 768]]


class TestDemoRecipe:
    TINY_CONFIG = {
        "n_train_scenes": 5,
        "n_eval_scenes": 6,
        "epochs": 1,
        "seeds": [3],
        "gl": {"epsilon": 0.01, "tau": 3.0, "eta": 0.1, "max_iters": 30, "tol": 1e-3},
    }

    def write_config(self, tmp_path, **overrides):
        cfg = dict(self.TINY_CONFIG)
        cfg.update(overrides)
        path = tmp_path / "demo.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_outputs_and_shape(self, tmp_path):
        cfg = self.write_config(tmp_path)
        out_dir = tmp_path / "run"
        main(["demo-recipe", "--config", str(cfg), "--out", str(out_dir)])
        table = (out_dir / "ablation.csv").read_text().strip().splitlines()
        assert len(table) == 6  # header + S1..S4 + aggregate
        traces = sorted(p.name for p in out_dir.glob("trace_*.csv"))
        assert traces == [
            "trace_S1_seed3.csv", "trace_S2_seed3.csv",
            "trace_S3_seed3.csv", "trace_S4_seed3.csv",
        ]

    def test_epochs_zero_warns_exit_0(self, tmp_path):
        cfg = self.write_config(tmp_path, epochs=0)
        out_dir = tmp_path / "run0"
        rc = main(["demo-recipe", "--config", str(cfg), "--out", str(out_dir)])
        assert rc == 0
        assert "epochs=0" in (out_dir / "ablation.csv").read_text()

    def test_determinism_across_thread_counts(self, tmp_path, monkeypatch):
        cfg = self.write_config(tmp_path)
        texts = []
        for threads in ("1", "3"):
            monkeypatch.setenv("COUNTFORGE_THREADS", threads)
            out_dir = tmp_path / f"run_t{threads}"
            main(["demo-recipe", "--config", str(cfg), "--out", str(out_dir)])
            texts.append((out_dir / "ablation.csv").read_bytes())
        assert texts[0] == texts[1]


class TestHelpDocumentsDefaults:
    def run_help(self, capsys, *argv):
        with pytest.raises(SystemExit):
            main([*argv, "--help"])
        return capsys.readouterr().out

    def test_gl_loss_defaults(self, capsys):
        text = self.run_help(capsys, "gl-loss")
        assert "0.01" in text and "0.5" in text and "0.6" in text
        assert "default: 4" in text

    def test_ttn_defaults(self, capsys):
        text = self.run_help(capsys, "ttn-plan")
        assert "default: 8" in text and "0.0002" in text

    def test_render_defaults(self, capsys):
        text = self.run_help(capsys, "render-density")
        assert "default: 4" in text and "default: 1.0" in text
