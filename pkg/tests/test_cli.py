import json

import pytest
import yaml

from twobranch.cli import EXIT_CODES, main

SMALL = {
    "model": {"image_hidden": 16, "text_hidden": 16, "embed": 8, "head_hidden": [8, 4]},
    "sampling": {"batch_pairs": 40},
    "train": {"epochs": 2, "activation_epoch": 1, "lr": 0.003},
}


def write_config(path, task, **updates):
    data = json.loads(json.dumps(SMALL))
    data["task"] = task
    for section, values in updates.items():
        data.setdefault(section, {}).update(values)
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    common = ["--train-items", "30", "--val-items", "0", "--test-items", "8", "--latent-dim", "4",
              "--image-dim", "12", "--text-dim", "10", "--seed", "3"]
    assert main(["gen-data", "--out", str(root / "loc"), "--task", "localization", *common]) == 0
    assert main(["gen-data", "--out", str(root / "ret"), "--task", "retrieval", "--with-regions", *common]) == 0
    return root


def train(workspace, task, network, name, **updates):
    cfg = write_config(workspace / f"{name}.yaml", task, **updates)
    manifest = workspace / ("loc" if task == "localization" else "ret") / "manifest.json"
    out = workspace / f"{name}.ckpt"
    code = main(["train", "--manifest", str(manifest), "--network", network, "--config", cfg,
                 "--out", str(out), "--metrics", str(workspace / f"{name}.jsonl")])
    return code, out, manifest


def table_rows(text):
    lines = [ln for ln in text.strip().splitlines() if ln and not ln.startswith(("task", "---"))]
    return [ln.split() for ln in lines]


class TestHelp:
    @pytest.mark.parametrize("cmd", ["gen-data", "train", "eval", "localize", "retrieve", "benchmark"])
    def test_subcommand_help(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--bogus"])
        assert exc.value.code == EXIT_CODES["usage"]


class TestPipeline:
    def test_localization_train_eval_localize(self, workspace, capsys):
        code, ckpt, manifest = train(workspace, "localization", "embedding", "loc-emb",
                                     sampling={"neighborhood": True})
        assert code == 0
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--ks", "1,5,10"]) == 0
        rows = table_rows(capsys.readouterr().out)
        assert [r[2] for r in rows] == ["1", "5", "10"]
        assert all(r[0] == "localization" for r in rows)
        assert main(["localize", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                     "--phrase-id", "img00030-p0", "--top", "3"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("phrase img00030-p0") and len(out) == 5

    def test_similarity_localization(self, workspace, capsys):
        code, ckpt, manifest = train(workspace, "localization", "similarity", "loc-sim")
        assert code == 0
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--ks", "1"]) == 0
        assert len(table_rows(capsys.readouterr().out)) == 1

    def test_retrieval_with_combined_distance(self, workspace, capsys, tmp_path):
        code, ckpt, manifest = train(workspace, "retrieval", "embedding", "ret-emb",
                                     sampling={"batch_pairs": 60, "neighborhood": True})
        assert code == 0
        # a region-phrase model trained on the retrieval manifest's regions
        region = workspace / "ret-region-on-ret.ckpt"
        cfg = write_config(workspace / "rr.yaml", "localization", sampling={"neighborhood": True})
        assert main(["train", "--manifest", str(manifest), "--task", "localization", "--config", cfg,
                     "--out", str(region)]) == 0
        capsys.readouterr()
        report = tmp_path / "report"
        assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--ks", "1,5",
                     "--alpha", "0.3", "--region-checkpoint", str(region), "--report-dir", str(report)]) == 0
        rows = table_rows(capsys.readouterr().out)
        assert {r[1] for r in rows} == {"i2s", "s2i", "s2s", "combined-i2s", "combined-s2i"}
        assert {p.name for p in report.iterdir()} >= {"recall.txt", "recall.jsonl", "recall.png"}
        assert (report / "recall.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

        assert main(["retrieve", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                     "--direction", "s2i", "--query", "img00030-s0", "--top", "2"]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 3
        assert main(["retrieve", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--direction", "s2s"]) == 0
        assert len(table_rows(capsys.readouterr().out)) == 3


class TestErrors:
    def test_similarity_with_neighborhood_terms(self, workspace, capsys):
        code, _, _ = train(workspace, "localization", "similarity", "bad",
                           loss={"lambdas": [1, 4, 0.1, 0]})
        assert code == EXIT_CODES["config"]
        assert "error [config]" in capsys.readouterr().err

    def test_unknown_config_key(self, workspace, capsys):
        code, _, _ = train(workspace, "localization", "embedding", "bad2", train={"epoch": 3})
        assert code == EXIT_CODES["config"]

    def test_missing_manifest(self, tmp_path, capsys):
        code = main(["train", "--manifest", str(tmp_path / "none.json"), "--task", "localization",
                     "--out", str(tmp_path / "x.ckpt")])
        assert code == EXIT_CODES["missing-file"]
        assert "error [missing-file]" in capsys.readouterr().err

    def test_missing_checkpoint(self, workspace, tmp_path):
        code = main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--manifest", str(workspace / "loc" / "manifest.json")])
        assert code == EXIT_CODES["checkpoint"]

    def test_corrupt_features(self, workspace, tmp_path):
        import shutil

        copy = tmp_path / "loc"
        shutil.copytree(workspace / "loc", copy)
        feat = next(copy.glob("phrases*"))
        data = bytearray(feat.read_bytes())
        data[40] ^= 0xFF
        feat.write_bytes(bytes(data))
        code = main(["train", "--manifest", str(copy / "manifest.json"), "--task", "localization",
                     "--config", write_config(tmp_path / "c.yaml", "localization"),
                     "--out", str(tmp_path / "x.ckpt")])
        assert code == EXIT_CODES["checksum"]
        assert not (tmp_path / "x.ckpt").exists()

    def test_alpha_needs_region_model(self, workspace, capsys):
        code, ckpt, manifest = train(workspace, "retrieval", "embedding", "ret2",
                                     sampling={"batch_pairs": 60, "neighborhood": True})
        assert code == 0
        assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--alpha", "0.3"]) == 2

    def test_bad_ks(self):
        with pytest.raises(SystemExit):
            main(["eval", "--checkpoint", "a", "--manifest", "b", "--ks", "0,x"])


class TestPresets:
    def test_similarity_network_from_embedding_preset(self, workspace, tmp_path):
        manifest = workspace / "loc" / "manifest.json"
        assert main(["train", "--manifest", str(manifest), "--preset", "desk-localization",
                     "--network", "similarity", "--epochs", "1", "--out", str(tmp_path / "s.ckpt")]) == 0

    def test_explicit_neighborhood_terms_still_rejected(self, workspace, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", "localization", model={"network": "similarity"},
                           loss={"lambdas_after": [1, 4, 0.1, 0.1]})
        assert main(["train", "--manifest", str(workspace / "loc" / "manifest.json"), "--config", cfg,
                     "--out", str(tmp_path / "s.ckpt")]) == EXIT_CODES["config"]
