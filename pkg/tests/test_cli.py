import json

import numpy as np
import pytest

from semvox.cli import main
from semvox.corpus import write_jsonl
from semvox.reports import render_slices
from semvox.synthetic import make_synthetic_corpus
from semvox.volgrid import BrainVolume, GridSpec, load_volume, save_volume, synthesize_target


@pytest.fixture()
def corpus_file(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_jsonl(make_synthetic_corpus(12, n_clusters=4, seed=1), path)
    return path


class TestRenderSlices:
    def test_z_axis_default_grid(self, tmp_path):
        vol = synthesize_target(GridSpec(), [(0.0, 0.0, 0.0)], 9.0)
        paths = render_slices(vol, "z", tmp_path)
        assert len(paths) == 40
        blob = paths[0].read_bytes()
        assert blob.startswith(b"P5\n40 48\n255\n")
        assert len(blob) == len(b"P5\n40 48\n255\n") + 40 * 48

    def test_header_and_names(self, tmp_path):
        grid = GridSpec(dims=(4, 5, 6), voxel_size_mm=(1, 1, 1), origin_mm=(0, 0, 0))
        vol = BrainVolume.zeros(grid)
        paths = render_slices(vol, "x", tmp_path)
        assert [p.name for p in paths] == [f"{i:03d}.pgm" for i in range(4)]
        assert paths[0].read_bytes().startswith(b"P5\n5 6\n255\n")

    def test_all_zero_volume_black(self, tmp_path):
        vol = BrainVolume.zeros(GridSpec(dims=(3, 3, 3), voxel_size_mm=(1, 1, 1), origin_mm=(0, 0, 0)))
        paths = render_slices(vol, "y", tmp_path)
        for p in paths:
            payload = p.read_bytes().split(b"\n", 3)[3]
            assert payload == bytes(9)

    def test_min_max_normalization(self, tmp_path):
        grid = GridSpec(dims=(2, 2, 2), voxel_size_mm=(1, 1, 1), origin_mm=(0, 0, 0))
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = 2.0
        data[1, 0, 0] = 1.0
        vol = BrainVolume(grid=grid, data=data)
        paths = render_slices(vol, "z", tmp_path)
        payload = paths[0].read_bytes().split(b"\n", 3)[3]
        # Row-major rows over y; row 0 is (x=0, x=1) at y=0.
        assert payload[0] == 255
        assert payload[1] == 128  # round(0.5 * 255) half up

    def test_bad_axis(self, tmp_path):
        vol = BrainVolume.zeros(GridSpec(dims=(2, 2, 2), voxel_size_mm=(1, 1, 1), origin_mm=(0, 0, 0)))
        with pytest.raises(ValueError):
            render_slices(vol, "w", tmp_path)


class TestDispatch:
    def test_unknown_subcommand_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "Usage" in capsys.readouterr().err

    def test_unknown_flag_usage_error(self, capsys):
        assert main(["ingest", "--nope"]) == 1

    def test_missing_required_flag(self, capsys):
        assert main(["ingest"]) == 1

    def test_missing_file_runtime_error(self, tmp_path, capsys):
        assert main(["ingest", "--corpus", str(tmp_path / "missing.jsonl")]) == 2

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "Usage" in capsys.readouterr().out


class TestIngestCommand:
    def test_ingest_reports_counts(self, corpus_file, capsys):
        assert main(["ingest", "--corpus", str(corpus_file)]) == 0
        out = capsys.readouterr().out
        assert "ingested 12 records" in out

    def test_ingest_writes_normalized_and_index(self, corpus_file, tmp_path, capsys):
        out_path = tmp_path / "normalized.jsonl"
        index_path = tmp_path / "index.c2bidx"
        code = main(
            [
                "ingest",
                "--corpus",
                str(corpus_file),
                "--out",
                str(out_path),
                "--index-out",
                str(index_path),
            ]
        )
        assert code == 0
        assert out_path.exists()
        assert index_path.read_bytes()[:8] == b"C2BIDX01"

    def test_ingest_diagnostics_to_stderr(self, tmp_path, capsys):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            '{"id": "a", "title": "t", "coordinates": [[1,2]], "space": "MNI152"}\n',
            encoding="utf-8",
        )
        assert main(["ingest", "--corpus", str(path)]) == 0
        captured = capsys.readouterr()
        assert "coordinates" in captured.err
        assert "rejected" in captured.out


class TestSynthTargets:
    def test_writes_volumes(self, corpus_file, tmp_path, capsys):
        out_dir = tmp_path / "targets"
        code = main(
            ["synth-targets", "--corpus", str(corpus_file), "--out-dir", str(out_dir), "--fwhm", "9"]
        )
        assert code == 0
        files = sorted(out_dir.glob("*.c2bvol"))
        assert len(files) == 12
        vol = load_volume(files[0])
        assert vol.grid == GridSpec()
        assert vol.data.max() == 1.0


class TestAugmentCommand:
    def test_augment_writes_variants(self, corpus_file, tmp_path, capsys):
        out_path = tmp_path / "augmented.jsonl"
        cache_path = tmp_path / "cache.jsonl"
        code = main(
            [
                "augment",
                "--corpus",
                str(corpus_file),
                "--cache",
                str(cache_path),
                "--client",
                "mock",
                "--out",
                str(out_path),
            ]
        )
        assert code == 0
        lines = out_path.read_text().strip().splitlines()
        assert len(lines) == 12
        rec = json.loads(lines[0])
        assert set(rec["variants"]) == {
            "title_syn_major",
            "title_syn_minor",
            "abstract",
            "experiment_design",
            "keywords",
        }
        assert cache_path.exists()

    def test_augment_idempotent_bytes(self, corpus_file, tmp_path):
        out_a = tmp_path / "a.jsonl"
        out_b = tmp_path / "b.jsonl"
        cache = tmp_path / "cache.jsonl"
        for out in (out_a, out_b):
            assert (
                main(
                    [
                        "augment",
                        "--corpus",
                        str(corpus_file),
                        "--cache",
                        str(cache),
                        "--client",
                        "mock",
                        "--out",
                        str(out),
                    ]
                )
                == 0
            )
        assert out_a.read_bytes() == out_b.read_bytes()


class TestGradcheckCommand:
    def test_gradcheck_passes(self, capsys):
        code = main(["gradcheck", "--dtype", "float64", "--samples", "60", "--seed", "1"])
        assert code == 0
        assert "max relative error" in capsys.readouterr().out

    def test_gradcheck_impossible_tolerance_fails(self, capsys):
        code = main(
            ["gradcheck", "--dtype", "float64", "--samples", "40", "--tolerance", "1e-30"]
        )
        assert code == 2


class TestRenderCommand:
    def test_render_from_file(self, tmp_path, capsys):
        vol = synthesize_target(GridSpec(), [(0.0, 0.0, 0.0)], 9.0)
        vol_path = tmp_path / "v.c2bvol"
        save_volume(vol, vol_path)
        out_dir = tmp_path / "slices"
        code = main(["render", "--volume", str(vol_path), "--axis", "z", "--out-dir", str(out_dir)])
        assert code == 0
        assert len(list(out_dir.glob("*.pgm"))) == 40

    def test_render_idempotent(self, tmp_path):
        vol = synthesize_target(GridSpec(), [(10.0, 0.0, 10.0)], 9.0)
        vol_path = tmp_path / "v.c2bvol"
        save_volume(vol, vol_path)
        dirs = [tmp_path / "s1", tmp_path / "s2"]
        for d in dirs:
            assert main(["render", "--volume", str(vol_path), "--axis", "y", "--out-dir", str(d)]) == 0
        for a, b in zip(sorted(dirs[0].iterdir()), sorted(dirs[1].iterdir())):
            assert a.read_bytes() == b.read_bytes()


class TestConfigFile:
    def test_config_supplies_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "semvox.conf"
        cfg.write_text("gradcheck.samples = 30\ngradcheck.dtype = float64\n", encoding="utf-8")
        code = main(["--config", str(cfg), "gradcheck"])
        assert code == 0
        assert "30 parameters" in capsys.readouterr().out

    def test_bad_config_line_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "semvox.conf"
        cfg.write_text("not a config line\n", encoding="utf-8")
        assert main(["--config", str(cfg), "gradcheck"]) == 1

    def test_missing_config_usage_error(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.conf"), "gradcheck"]) == 1


class TestEndToEnd:
    def test_full_pipeline(self, tmp_path, capsys):
        corpus = tmp_path / "corpus.jsonl"
        write_jsonl(make_synthetic_corpus(8, n_clusters=4, seed=3), corpus)
        index = tmp_path / "index.c2bidx"
        ckpt = tmp_path / "model.c2bckpt"
        logdir = tmp_path / "trainlog"

        assert main(["ingest", "--corpus", str(corpus), "--index-out", str(index)]) == 0
        assert (
            main(
                [
                    "train", "--corpus", str(corpus), "--checkpoint", str(ckpt),
                    "--split", "all", "--epochs", "1", "--batch-size", "4",
                    "--seed", "0", "--log-dir", str(logdir),
                ]
            )
            == 0
        )
        assert ckpt.read_bytes()[:8] == b"C2BCKPT1"
        assert (logdir / "loss_log.csv").exists()
        assert (logdir / "loss_curve.png").exists()

        pred = tmp_path / "pred.c2bvol"
        nifti = tmp_path / "pred.nii"
        assert (
            main(
                [
                    "predict", "--checkpoint", str(ckpt), "--text", "pain processing",
                    "--out", str(pred), "--nifti-out", str(nifti),
                ]
            )
            == 0
        )
        vol = load_volume(pred)
        assert vol.data.shape == (40, 48, 40)
        assert nifti.read_bytes()[:4] == (348).to_bytes(4, "little")

        refined = tmp_path / "refined.c2bvol"
        transcript = tmp_path / "transcript.json"
        code = main(
            [
                "query", "--checkpoint", str(ckpt), "--index", str(index),
                "--text", "noisy pain related text", "--t2s", "--client", "mock",
                "--out", str(refined), "--transcript-out", str(transcript),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert out.strip().endswith(str(refined))
        assert '"history"' in out  # transcript printed before the volume path
        assert transcript.exists()
        assert load_volume(refined).data.shape == (40, 48, 40)

        report_dir = tmp_path / "report"
        code = main(
            [
                "evaluate", "--checkpoint", str(ckpt), "--corpus", str(corpus),
                "--split", "all", "--fractions", "100,50,10", "--env", "masked",
                "--mask-rate", "0.5", "--seed", "1", "--chat", "--client", "mock",
                "--out-dir", str(report_dir),
            ]
        )
        assert code == 0
        table = capsys.readouterr().out
        assert "non-aug-50" in table
        assert (report_dir / "report.json").exists()
        assert (report_dir / "report.csv").exists()
        assert (report_dir / "fig_dice.png").exists()
        obj = json.loads((report_dir / "report.json").read_text())
        assert [row["label"] for row in obj["rows"]] == [
            "non-aug-100", "non-aug-50", "non-aug-10",
        ]

    def test_evaluate_idempotent_bytes(self, tmp_path):
        corpus = tmp_path / "corpus.jsonl"
        write_jsonl(make_synthetic_corpus(6, n_clusters=3, seed=5), corpus)
        ckpt = tmp_path / "model.c2bckpt"
        assert (
            main(
                [
                    "train", "--corpus", str(corpus), "--checkpoint", str(ckpt),
                    "--split", "all", "--epochs", "1", "--batch-size", "4",
                ]
            )
            == 0
        )
        dirs = [tmp_path / "r1", tmp_path / "r2"]
        for d in dirs:
            assert (
                main(
                    [
                        "evaluate", "--checkpoint", str(ckpt), "--corpus", str(corpus),
                        "--split", "all", "--fractions", "50,10", "--env", "masked",
                        "--mask-rate", "0.3", "--seed", "3", "--chat",
                        "--client", "mock", "--out-dir", str(d),
                    ]
                )
                == 0
            )
        for name in ("report.json", "report.txt", "report.csv", "fig_auc.png",
                     "fig_dice.png", "fig_iou.png"):
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
