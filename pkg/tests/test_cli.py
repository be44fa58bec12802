import filecmp
import json
import os

import numpy as np
import pytest

from quadfit import dataio
from quadfit.cli import main
from quadfit.fitter import FitConfig
from quadfit.zoo import toy_model_path


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "synth"
    rc = main(["synth", "--model", toy_model_path(), "--out", str(out),
               "--count", "4", "--clusters", "2", "--seed", "3"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    run = dataio.RunConfig(fit=FitConfig(stage1_iters=25, stage2_iters=12,
                                         em_interval=6, clusters=2,
                                         progress=False))
    dataio.save_run_config(path, run)
    return path


@pytest.fixture(scope="module")
def fits_dir(tmp_path_factory, corpus_dir, config_path):
    out = tmp_path_factory.mktemp("cli") / "fits"
    rc = main(["fit-batch", "--model", toy_model_path(),
               "--annotations", str(corpus_dir / "annotations.json"),
               "--config", str(config_path), "--out", str(out),
               "--em", "--seed", "3"])
    assert rc == 0
    return out


class TestPipeline:
    def test_synth_manifest_lists_artifacts(self, corpus_dir):
        manifest = json.load(open(corpus_dir / "manifest.json"))
        assert manifest["command"] == "synth"
        assert "annotations.json" in manifest["artifacts"]
        assert "ground_truth.json" in manifest["artifacts"]
        assert any(a.startswith("masks/") for a in manifest["artifacts"])
        for artifact in manifest["artifacts"]:
            assert (corpus_dir / artifact).exists()

    def test_fit_batch_writes_everything(self, fits_dir):
        manifest = json.load(open(fits_dir / "manifest.json"))
        assert "fits.json" in manifest["artifacts"]
        assert "mixture.json" in manifest["artifacts"]
        assert "mixture_round_001.json" in manifest["artifacts"]
        assert "mixture_round_002.json" in manifest["artifacts"]
        reports = dataio.load_reports(fits_dir / "fits.json")
        assert len(reports) == 4

    def test_eval_end_to_end(self, corpus_dir, fits_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main(["eval", "--model", toy_model_path(),
                   "--annotations", str(corpus_dir / "annotations.json"),
                   "--fits", str(fits_dir / "fits.json"),
                   "--out", str(out)])
        assert rc == 0
        table = capsys.readouterr().out
        assert "mean" in table
        results = json.load(open(out / "results.json"))
        assert len(results["images"]) == 4
        assert 0.0 <= results["summary"]["mean_iou"] <= 1.0

    def test_render_writes_overlays(self, corpus_dir, fits_dir, tmp_path):
        out = tmp_path / "render"
        rc = main(["render", "--model", toy_model_path(),
                   "--annotations", str(corpus_dir / "annotations.json"),
                   "--fits", str(fits_dir / "fits.json"),
                   "--out", str(out), "--id", "img_0000"])
        assert rc == 0
        assert (out / "overlay_img_0000.png").exists()

    def test_em_refine_runs_on_saved_fits(self, fits_dir, tmp_path):
        out = tmp_path / "refined"
        rc = main(["em-refine", "--model", toy_model_path(),
                   "--fits", str(fits_dir / "fits.json"),
                   "--out", str(out), "--clusters", "2", "--seed", "0"])
        assert rc == 0
        doc = json.load(open(out / "em_log_likelihood.json"))
        ll = doc["log_likelihood"]
        assert all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))
        mix = dataio.load_mixture(out / "mixture.json")
        assert mix.n_components == 2


class TestErrors:
    def test_unknown_flag_exits_one(self, capsys):
        rc = main(["synth", "--model", "x", "--out", "y", "--bogus"])
        assert rc == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand_exits_one(self):
        assert main(["frobnicate"]) == 1

    def test_eval_id_mismatch_names_id(self, corpus_dir, fits_dir, tmp_path,
                                       capsys):
        fits = dataio.load_reports(fits_dir / "fits.json")
        import dataclasses

        renamed = [dataclasses.replace(fits[0], image_id="missing_id")] + fits[1:]
        bad = tmp_path / "bad_fits.json"
        dataio.save_reports(bad, renamed)
        rc = main(["eval", "--model", toy_model_path(),
                   "--annotations", str(corpus_dir / "annotations.json"),
                   "--fits", str(bad), "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "missing_id" in capsys.readouterr().err

    def test_missing_model_file_exits_one(self, tmp_path):
        rc = main(["synth", "--model", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "o")])
        assert rc == 1

    def test_malformed_model_exits_one(self, tmp_path):
        bad = tmp_path / "bad_model.json"
        bad.write_text('{"format_version": "1"}')
        rc = main(["synth", "--model", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 1


class TestDeterminism:
    def _tree_bytes(self, root):
        out = {}
        for base, _, files in os.walk(root):
            for name in files:
                path = os.path.join(base, name)
                with open(path, "rb") as fh:
                    out[os.path.relpath(path, root)] = fh.read()
        return out

    def test_synth_byte_identical(self, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            rc = main(["synth", "--model", toy_model_path(), "--out", str(out),
                       "--count", "3", "--clusters", "2", "--seed", "11"])
            assert rc == 0
            outs.append(self._tree_bytes(out))
        assert outs[0] == outs[1]

    def test_fit_batch_byte_identical(self, corpus_dir, config_path, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            rc = main(["fit-batch", "--model", toy_model_path(),
                       "--annotations", str(corpus_dir / "annotations.json"),
                       "--config", str(config_path), "--out", str(out),
                       "--em", "--seed", "5"])
            assert rc == 0
            outs.append(self._tree_bytes(out))
        assert outs[0] == outs[1]

    def test_em_refine_byte_identical(self, fits_dir, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            rc = main(["em-refine", "--model", toy_model_path(),
                       "--fits", str(fits_dir / "fits.json"),
                       "--out", str(out), "--clusters", "2", "--seed", "1"])
            assert rc == 0
            outs.append(self._tree_bytes(out))
        assert outs[0] == outs[1]


class TestCheckGrads:
    def test_passes_on_toy_model(self, tmp_path, capsys):
        rc = main(["check-grads", "--model", toy_model_path(),
                   "--out", str(tmp_path / "g"), "--points", "2", "--seed", "0"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        doc = json.load(open(tmp_path / "g" / "grad_check.json"))
        assert all(v < 1e-4 for v in doc["max_rel_error"].values())

    def test_threshold_failure_exits_two(self, tmp_path):
        rc = main(["check-grads", "--model", toy_model_path(),
                   "--out", str(tmp_path / "g"), "--points", "1",
                   "--threshold", "1e-18", "--seed", "0"])
        assert rc == 2
