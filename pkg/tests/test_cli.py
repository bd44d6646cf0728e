import pytest

from highratemos.cli import main
from highratemos.config import RunConfig, parse_text
from highratemos.data import PredictionSet, load_manifest, read_predictions, write_predictions

SMALL = """\
seed=0
encoder.dim=8
feature.n_mels=20
feature.n_mfcc=5
model.variant=M2
model.d_sr=4
model.cnn_channels=4
model.blstm_hidden=8
model.attn_dim=8
train.max_steps=20
train.validate_every=10
train.patience_steps=10
train.batch_size=4
"""


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-synthetic", "--out", str(root), "--systems", "4", "--per-system", "4"]) == 0
    (root / "small.cfg").write_text(SMALL)
    return root


def test_evaluate_perfect_predictions(corpus, tmp_path, capsys):
    recs = load_manifest(corpus / "manifest.csv")
    write_predictions(PredictionSet.from_records(recs, [r.mos for r in recs]), tmp_path / "p.tsv")
    assert main(["evaluate", "--manifest", str(corpus / "manifest.csv"), "--predictions",
                 str(tmp_path / "p.tsv")]) == 0
    out = capsys.readouterr().out
    assert "sys.srcc=1.0\n" in out
    assert "utt.mse=0.0\n" in out


def test_ablate_changes_only_the_component(corpus, tmp_path):
    base, abl = tmp_path / "base", tmp_path / "abl"
    common = ["--manifest", str(corpus / "manifest.csv"), "--config", str(corpus / "small.cfg")]
    assert main(["train", *common, "--out", str(base)]) == 0
    assert main(["ablate", *common, "--out", str(abl), "--component", "blstm"]) == 0
    a = parse_text((base / "config.resolved").read_text())
    b = parse_text((abl / "config.resolved").read_text())
    assert {k for k in a if a[k] != b[k]} == {"model.blstm"}
    assert (a["model.blstm"], b["model.blstm"]) == ("true", "false")
    for name in ("best.ckpt", "history.csv", "dev_predictions.tsv", "dev_report.txt"):
        assert (abl / name).exists()

    # predict rebuilds features from the config stored in the checkpoint
    out = tmp_path / "pred.tsv"
    assert main(["predict", "--manifest", str(corpus / "manifest.csv"), "--checkpoint",
                 str(base / "best.ckpt"), "--out", str(out)]) == 0
    assert len(read_predictions(out)) == 16


def test_ensemble_averages_files(corpus, tmp_path):
    ids = ["a", "b"]
    paths = []
    for i, vals in enumerate(([1.0, 2.0], [2.0, 4.0], [3.0, 0.0])):
        paths.append(str(tmp_path / f"m{i}.tsv"))
        write_predictions(PredictionSet(dict(zip(ids, vals))), paths[-1])
    assert main(["ensemble", "setting3", *paths, "--out", str(tmp_path / "e.tsv")]) == 0
    assert read_predictions(tmp_path / "e.tsv").entries == {"a": 2.0, "b": 2.0}
    assert main(["ensemble", "setting3", *paths[:2], "--out", str(tmp_path / "e.tsv")]) == 2


def test_unknown_config_key(corpus, tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("train.learning_rat=0.1\n")
    code = main(["train", "--manifest", str(corpus / "manifest.csv"), "--config", str(tmp_path / "bad.cfg"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "train.learning_rat" in err and len(err.strip().splitlines()) == 1


def test_missing_manifest(tmp_path, capsys):
    code = main(["evaluate", "--manifest", str(tmp_path / "nope.csv"), "--predictions", str(tmp_path / "p.tsv")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error: ")


def test_extract_writes_cache(corpus, tmp_path):
    assert main(["extract", "--manifest", str(corpus / "manifest.csv"), "--config", str(corpus / "small.cfg"),
                 "--out", str(tmp_path)]) == 0
    cfg = RunConfig.from_file(corpus / "small.cfg")
    cached = list((tmp_path / cfg.make_extractor().config_hash).iterdir())
    assert len(cached) == 16


def test_default_config_round_trips():
    cfg = RunConfig.resolve()
    assert RunConfig.resolve(parse_text(cfg.to_text())).values == cfg.values
    assert cfg.values["model.cross_attn"] is False
    assert RunConfig.resolve({"model.variant": "M3"}).values["model.mfcc"] is True
