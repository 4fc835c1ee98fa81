"""End-to-end command-line pipeline tests.

A module-scoped workspace carries one small synthetic dataset through
train / pbt / ensemble / predict / evaluate; image-based commands run on a
tiny generated slide.
"""

import filecmp
import json
import os

import numpy as np
import pytest

from cordmil.bags import DatasetManifest, read_bag
from cordmil.cli import dispatch
from cordmil.imaging import write_image

SUBCOMMANDS = (
    "tile", "embed", "synth", "split", "train", "pbt", "ensemble",
    "predict", "heatmap", "analyze", "evaluate",
)


def run(argv):
    return dispatch(list(argv))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Dataset + slide + trained artifacts shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run([
        "synth", "--bags", "10", "--dim", "8", "--min-patches", "5", "--max-patches", "8",
        "--separation", "6", "--noise", "0.5", "--seed", "1", "--out", str(data),
    ]) == 0

    slide = root / "slide.png"
    img = np.full((64, 64, 3), 255, np.uint8)
    img[:, :32] = 30
    write_image(img, slide)

    tile_out = root / "tile"
    assert run([
        "tile", "--image", str(slide), "--patch", "16", "--downsample", "4",
        "--out", str(tile_out),
    ]) == 0

    embed_out = root / "embed"
    assert run([
        "embed", "--image", str(slide), "--grid", str(tile_out / "patch_grid.json"),
        "--dim", "8", "--seed", "2", "--out", str(embed_out),
    ]) == 0

    train_out = root / "train"
    assert run([
        "train", "--manifest", str(data / "manifest.json"), "--hidden", "8",
        "--gate", "6", "--attn-hidden", "4", "--epochs", "3", "--seed", "3",
        "--out", str(train_out),
    ]) == 0

    pbt_out = root / "pbt"
    assert run([
        "pbt", "--manifest", str(data / "manifest.json"), "--hidden", "8",
        "--gate", "6", "--attn-hidden", "4", "--population", "3", "--epochs", "3",
        "--min-epochs", "1", "--interval", "1", "--seed", "4", "--out", str(pbt_out),
    ]) == 0

    ens_out = root / "ens"
    assert run([
        "ensemble", "--manifest", str(data / "manifest.json"),
        "--checkpoints", str(pbt_out), "--k-max", "3", "--out", str(ens_out),
    ]) == 0

    return {
        "root": root,
        "manifest": data / "manifest.json",
        "slide": slide,
        "grid": tile_out / "patch_grid.json",
        "bag": embed_out / "bag.milb",
        "checkpoint": train_out / "model.milc",
        "pbt": pbt_out,
        "ensemble": ens_out / "ensemble.json",
    }


class TestExitCodes:
    def test_no_subcommand_is_usage_error(self, capsys):
        assert run([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 2

    def test_unknown_flag(self, capsys):
        assert run(["synth", "--does-not-exist", "1"]) == 2

    def test_domain_error_is_one_line(self, tmp_path, capsys):
        assert run(["predict", "--bag", str(tmp_path / "missing.milb"),
                    "--checkpoint", str(tmp_path / "missing.milc"),
                    "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error:")
        assert len(err.splitlines()) == 1

    @pytest.mark.parametrize("name", SUBCOMMANDS)
    def test_help_documents_defaults(self, name, capsys):
        assert run([name, "--help"]) == 0
        out = capsys.readouterr().out
        assert "(default:" in out


class TestPipelineArtifacts:
    def test_tile_outputs(self, work, capsys):
        grid = json.loads(work["grid"].read_text())
        assert grid["patch_size"] == 16
        assert len(grid["coords"]) >= 1
        # dark left half: every kept patch sits in x < 32
        assert all(x < 32 for x, _ in grid["coords"])
        assert (work["grid"].parent / "tissue_mask.png").exists()

    def test_embed_matches_grid(self, work):
        bag = read_bag(work["bag"])
        grid = json.loads(work["grid"].read_text())
        assert bag.n_patches == len(grid["coords"])
        assert bag.dim == 8
        np.testing.assert_array_equal(bag.coords, np.asarray(grid["coords"]))

    def test_synth_manifest_has_all_splits(self, work):
        manifest = DatasetManifest.load(work["manifest"])
        assert len(manifest.entries) == 30
        for split in ("train", "val", "test"):
            assert manifest.split_entries(split)

    def test_split_reassigns_and_keeps_bags_reachable(self, work, tmp_path):
        out = tmp_path / "resplit"
        assert run(["split", "--manifest", str(work["manifest"]),
                    "--fractions", "0.6", "0.2", "0.2", "--seed", "9",
                    "--out", str(out)]) == 0
        manifest = DatasetManifest.load(out / "manifest.json")
        counts = {s: len(manifest.split_entries(s)) for s in ("train", "val", "test")}
        assert counts == {"train": 18, "val": 6, "test": 6}
        from cordmil.bags import resolve_bag_path

        first = manifest.entries[0]
        assert os.path.exists(resolve_bag_path(out / "manifest.json", first.bag))

    def test_predict_single_model_with_attention(self, work, tmp_path, capsys):
        manifest = DatasetManifest.load(work["manifest"])
        bag_path = os.path.join(os.path.dirname(str(work["manifest"])), manifest.entries[0].bag)
        out = tmp_path / "pred"
        assert run(["predict", "--bag", bag_path, "--checkpoint", str(work["checkpoint"]),
                    "--attention", "--out", str(out)]) == 0
        payload = json.loads((out / "prediction.json").read_text())
        assert len(payload["probabilities"]) == 3
        assert abs(sum(payload["probabilities"]) - 1.0) < 1e-9
        assert payload["predicted_class"] == int(np.argmax(payload["probabilities"]))
        bag = read_bag(bag_path)
        assert len(payload["attention"]) == 3
        assert all(len(row) == bag.n_patches for row in payload["attention"])

    def test_predict_with_ensemble(self, work, tmp_path):
        manifest = DatasetManifest.load(work["manifest"])
        bag_path = os.path.join(os.path.dirname(str(work["manifest"])), manifest.entries[0].bag)
        out = tmp_path / "pred"
        assert run(["predict", "--bag", bag_path, "--ensemble", str(work["ensemble"]),
                    "--out", str(out)]) == 0
        payload = json.loads((out / "prediction.json").read_text())
        assert abs(sum(payload["probabilities"]) - 1.0) < 1e-9

    def test_attention_flag_requires_single_model(self, work, tmp_path, capsys):
        manifest = DatasetManifest.load(work["manifest"])
        bag_path = os.path.join(os.path.dirname(str(work["manifest"])), manifest.entries[0].bag)
        assert run(["predict", "--bag", bag_path, "--ensemble", str(work["ensemble"]),
                    "--attention", "--out", str(tmp_path / "o")]) == 1
        assert "attention" in capsys.readouterr().err

    def test_heatmap_renders_with_top_patches(self, work, tmp_path):
        # The embed bag (dim 8) matches the train checkpoint's input_dim.
        out = tmp_path / "hm"
        assert run(["heatmap", "--image", str(work["slide"]), "--grid", str(work["grid"]),
                    "--bag", str(work["bag"]), "--checkpoint", str(work["checkpoint"]),
                    "--scale", "16", "--top-k", "2", "--out", str(out)]) == 0
        from PIL import Image

        with Image.open(out / "heatmap.png") as im:
            assert im.size == (4, 4)
        meta = json.loads((out / "top_patches.json").read_text())
        assert [m["rank"] for m in meta] == [1, 2]
        assert (out / "patch_rank_01.png").exists()
        assert (out / "patch_rank_02.png").exists()

    def test_evaluate_single_model(self, work, tmp_path, capsys):
        out = tmp_path / "eval"
        assert run(["evaluate", "--manifest", str(work["manifest"]),
                    "--checkpoint", str(work["checkpoint"]), "--split", "test",
                    "--out", str(out)]) == 0
        payload = json.loads((out / "metrics.json").read_text())
        for key in ("balanced_accuracy", "macro_auroc", "macro_sensitivity",
                    "macro_specificity", "per_class_recalls"):
            assert key in payload
        assert (out / "confusion.csv").read_text().startswith("section,pred_0")

    def test_evaluate_ensemble(self, work, tmp_path):
        out = tmp_path / "eval"
        assert run(["evaluate", "--manifest", str(work["manifest"]),
                    "--ensemble", str(work["ensemble"]), "--split", "val",
                    "--out", str(out)]) == 0
        assert (out / "metrics.json").exists()

    def test_dimension_mismatch_exits_one(self, work, tmp_path, capsys):
        other = tmp_path / "other"
        assert run(["synth", "--bags", "4", "--dim", "16", "--min-patches", "5",
                    "--max-patches", "6", "--seed", "8", "--out", str(other)]) == 0
        assert run(["evaluate", "--manifest", str(other / "manifest.json"),
                    "--checkpoint", str(work["checkpoint"]), "--split", "train",
                    "--out", str(tmp_path / "o")]) == 1
        assert "dimension mismatch" in capsys.readouterr().err

    def test_analyze_blobs(self, tmp_path):
        out = tmp_path / "an"
        assert run(["analyze", "--blobs", "classes=3,per=20,dim=6,sep=10",
                    "--pca", "4", "--kmeans", "3", "--knn", "3",
                    "--tsne", "--perplexity", "5", "--iterations", "60",
                    "--seed", "11", "--out", str(out)]) == 0
        payload = json.loads((out / "analysis.json").read_text())
        assert payload["n_points"] == 60
        assert payload["pca_components"] == 4
        assert payload["kmeans_k"] == 3
        assert payload["knn_balanced_accuracy"] >= 0.9
        assert payload["tsne_kl"] >= 0.0
        assert (out / "tsne.csv").exists()
        assert (out / "tsne.png").exists()

    def test_analyze_npz_input(self, tmp_path):
        rng = np.random.default_rng(12)
        path = tmp_path / "emb.npz"
        np.savez(path, embeddings=rng.normal(size=(40, 5)),
                 labels=rng.integers(0, 2, 40))
        out = tmp_path / "an"
        assert run(["analyze", "--data", str(path), "--pca", "2", "--kmeans", "2",
                    "--knn", "0", "--out", str(out)]) == 0
        payload = json.loads((out / "analysis.json").read_text())
        assert payload["n_points"] == 40

    def test_analyze_requires_input(self, tmp_path, capsys):
        assert run(["analyze", "--out", str(tmp_path / "o")]) == 1
        assert "--data" in capsys.readouterr().err


class TestDeterminism:
    def test_synth_byte_identical(self, tmp_path):
        args = ["synth", "--bags", "3", "--dim", "8", "--min-patches", "5",
                "--max-patches", "6", "--seed", "7"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(args + ["--out", str(a)]) == 0
        assert run(args + ["--out", str(b)]) == 0
        names = sorted(os.listdir(a))
        assert names == sorted(os.listdir(b))
        for name in names:
            assert filecmp.cmp(a / name, b / name, shallow=False), name

    def test_train_byte_identical(self, work, tmp_path):
        args = ["train", "--manifest", str(work["manifest"]), "--hidden", "8",
                "--gate", "6", "--attn-hidden", "4", "--epochs", "2", "--seed", "5"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(args + ["--out", str(a)]) == 0
        assert run(args + ["--out", str(b)]) == 0
        assert filecmp.cmp(a / "model.milc", b / "model.milc", shallow=False)

    def test_pbt_byte_identical(self, work, tmp_path):
        args = ["pbt", "--manifest", str(work["manifest"]), "--hidden", "8",
                "--gate", "6", "--attn-hidden", "4", "--population", "2",
                "--epochs", "2", "--min-epochs", "1", "--interval", "1",
                "--seed", "6", "--threads", "1"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(args + ["--out", str(a)]) == 0
        assert run(args + ["--out", str(b)]) == 0
        for name in ("pbt_report.csv", "pbt_summary.json", "member_000.milc", "member_001.milc"):
            assert filecmp.cmp(a / name, b / name, shallow=False), name


class TestConfigAndManifest:
    def test_config_file_fills_unset_flags(self, work, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 42, "train": {"epochs": 2, "hidden": 8}}))
        out = tmp_path / "o"
        assert run(["train", "--manifest", str(work["manifest"]), "--gate", "6",
                    "--attn-hidden", "4", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        resolved = manifest["resolved_config"]
        assert resolved["epochs"] == 2
        assert resolved["hidden"] == 8
        assert resolved["seed"] == 42

    def test_explicit_flags_beat_config(self, work, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"epochs": 2, "hidden": 16}}))
        out = tmp_path / "o"
        assert run(["train", "--manifest", str(work["manifest"]), "--gate", "6",
                    "--attn-hidden", "4", "--hidden", "8", "--epochs", "1",
                    "--config", str(cfg), "--out", str(out)]) == 0
        resolved = json.loads((out / "run_manifest.json").read_text())["resolved_config"]
        assert resolved["epochs"] == 1
        assert resolved["hidden"] == 8

    def test_toml_config(self, work, tmp_path):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text('[train]\nepochs = 2\nhidden = 8\n')
        out = tmp_path / "o"
        assert run(["train", "--manifest", str(work["manifest"]), "--gate", "6",
                    "--attn-hidden", "4", "--config", str(cfg), "--out", str(out)]) == 0
        resolved = json.loads((out / "run_manifest.json").read_text())["resolved_config"]
        assert resolved["epochs"] == 2

    def test_run_manifest_records_input_hashes(self, work, tmp_path):
        import hashlib

        out = tmp_path / "o"
        assert run(["evaluate", "--manifest", str(work["manifest"]),
                    "--checkpoint", str(work["checkpoint"]), "--split", "val",
                    "--out", str(out)]) == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "evaluate"
        assert manifest["package_version"]
        want = hashlib.sha256(work["manifest"].read_bytes()).hexdigest()
        assert manifest["input_hashes"]["manifest"] == want
        assert manifest["resolved_config"]["split"] == "val"
