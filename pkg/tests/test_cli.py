import json

import numpy as np
import pytest
from PIL import Image

from dcp.cli import main, read_mask, write_mask
from dcp.data import SyntheticShapes

TOY = [
    "--set", "model.backbone=toy", "--set", "model.channels=8", "--set", "model.aspp_rates=[1,2]",
    "--set", "data.synthetic_images_per_class=8", "--set", "data.synthetic_seed=3",
    "--set", "train.episodes_per_epoch=2", "--set", "train.batch_episodes=2",
]


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    assert main(["train", "--run-dir", str(run), "--set", "train.epochs=1", *TOY]) == 0
    return run / "checkpoints" / "final.ckpt"


@pytest.fixture(scope="module")
def pngs(tmp_path_factory):
    d = tmp_path_factory.mktemp("png")
    ds = SyntheticShapes(images_per_class=8, seed=3)
    paths = []
    for i, image_id in enumerate(ds.image_ids[:6]):
        label = ds.label(image_id)
        areas = ds.areas(image_id)
        cls = max(areas, key=areas.get)
        Image.fromarray(ds.image(image_id)).save(d / f"img{i}.png")
        write_mask(d / f"mask{i}.png", label == cls)
        paths.append((d / f"img{i}.png", d / f"mask{i}.png"))
    return paths


def test_train_writes_checkpoint_and_manifest(checkpoint):
    assert checkpoint.exists()
    run = checkpoint.parent.parent
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert len(manifest["artifact_hash"]) == 16
    assert manifest["config"]["model"]["backbone"] == "toy"
    records = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [0]


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    assert main(["train", "--run-dir", str(tmp_path), "--set", "train.bogus=1"]) == 2
    assert "train.bogus" in capsys.readouterr().err


def test_invalid_config_combination_is_usage_error(tmp_path):
    code = main(["train", "--run-dir", str(tmp_path), "--set", "model.fusion_strategy=tile_concat"])
    assert code == 2


def test_eval_zero_episodes_is_usage_error(checkpoint, tmp_path):
    assert main(["eval", str(checkpoint), "--episodes", "0", "--out", str(tmp_path)]) == 2


def test_eval_multiple_seeds(checkpoint, tmp_path, capsys):
    code = main(["eval", str(checkpoint), "--episodes", "3", "--seeds", "5", "--out", str(tmp_path), "--plot"])
    assert code == 0
    for s in range(5):
        assert (tmp_path / f"report_seed{s}.json").exists()
        assert (tmp_path / f"report_seed{s}_confusion.csv").exists()
    mean = json.loads((tmp_path / "report_mean.json").read_text())
    runs = [json.loads((tmp_path / f"report_seed{s}.json").read_text()) for s in range(5)]
    assert mean["miou"] == pytest.approx(np.mean([r["miou"] for r in runs]))
    assert (tmp_path / "manifest.json").exists()
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["miou"] == pytest.approx(mean["miou"])


def test_eval_oracle_scores_one(tmp_path):
    assert main(["eval", "--oracle", "--episodes", "20", "--seeds", "1", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report_seed0.json").read_text())
    assert report["miou"] == 1.0 and report["fb_iou"] == 1.0


@pytest.mark.parametrize("shots", [1, 5])
def test_predict(checkpoint, pngs, tmp_path, shots):
    args = ["predict", str(checkpoint), "--query", str(pngs[-1][0]), "--out", str(tmp_path / "q.png")]
    for img, mask in pngs[:shots]:
        args += ["--support-image", str(img), "--support-mask", str(mask)]
    assert main(args) == 0
    out = read_mask(tmp_path / "q.png")
    assert out.shape == (64, 64)
    assert set(np.unique(out)) <= {0, 1}


def test_predict_missing_mask_is_usage_error(checkpoint, pngs, tmp_path):
    args = ["predict", str(checkpoint), "--query", str(pngs[2][0]), "--out", str(tmp_path / "q.png"),
            "--support-image", str(pngs[0][0]), "--support-image", str(pngs[1][0]),
            "--support-mask", str(pngs[0][1])]
    assert main(args) == 2


def test_bad_checkpoint_exit_code(pngs, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    args = ["predict", str(bad), "--query", str(pngs[1][0]), "--out", str(tmp_path / "q.png"),
            "--support-image", str(pngs[0][0]), "--support-mask", str(pngs[0][1])]
    assert main(args) == 3
    assert main(["eval", str(bad), "--episodes", "2", "--out", str(tmp_path)]) == 3


def test_activations_dump(checkpoint, pngs, tmp_path):
    args = ["activations-dump", str(checkpoint), "--query", str(pngs[1][0]), "--out-dir", str(tmp_path),
            "--support-image", str(pngs[0][0]), "--support-mask", str(pngs[0][1])]
    assert main(args) == 0
    names = {p.name for p in tmp_path.iterdir()}
    for kind in ("foreground", "background", "alpha", "beta", "gamma", "delta"):
        assert f"activation_{kind}.png" in names
    assert "regions_shot0.png" in names


def test_maskdiv_inspect_from_masks(tmp_path, capsys):
    pred = np.zeros((4, 4), np.int64)
    pred[:2] = 1
    gt = np.zeros((4, 4), np.int64)
    gt[:, :2] = 1
    write_mask(tmp_path / "p.png", pred)
    write_mask(tmp_path / "g.png", gt)
    out = tmp_path / "r.png"
    assert main(["maskdiv-inspect", "--pred", str(tmp_path / "p.png"), "--gt", str(tmp_path / "g.png"),
                 "--scale", "2", "--out", str(out)]) == 0
    counts = json.loads(capsys.readouterr().out)
    assert counts == {"alpha": 4, "beta": 4, "gamma": 4, "delta": 4}
    assert Image.open(out).size == (8, 8)


def test_maskdiv_inspect_from_checkpoint(checkpoint, pngs, tmp_path):
    img, mask = pngs[0]
    assert main(["maskdiv-inspect", "--checkpoint", str(checkpoint), "--image", str(img), "--gt", str(mask),
                 "--out", str(tmp_path / "r.png")]) == 0


def test_maskdiv_inspect_needs_inputs(tmp_path):
    assert main(["maskdiv-inspect", "--out", str(tmp_path / "r.png")]) == 2


def test_count_params(capsys):
    assert main(["count-params", "--set", "model.backbone=toy", "--set", "model.channels=8"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["backbone"] == "toy" and out["learnable_params"] > 0


def test_query_equal_to_support_sanity(tmp_path, record_property):
    """Measured, not asserted: mask IoU when the query is the support image itself."""
    from dcp.config import load_config
    from dcp.episodes import Episode
    from dcp.network import forward_episode
    from dcp.training import Trainer

    cfg = load_config(None, TOY[1::2] + ["train.epochs=40", "train.lr=0.02", "train.momentum=0.9",
                                         "train.augment=true", "train.log_every=0"])
    trainer = Trainer(cfg, tmp_path)
    trainer.run()
    pred_iou, sr_iou = [], []
    for seed in range(10):
        ep = trainer.sampler.sample("test", 1, seed)
        img, mask = ep.support[0]
        out = forward_episode(trainer.model, Episode([(img, mask)], img, mask, ep.class_id, seed), details=True)
        d = out.details
        pred_iou.append(_iou(out.mask[0].numpy(), mask))
        sr_iou.append(_iou(d["support_pred"][0, 0].numpy(), d["support_gt"][0, 0].numpy()))
    record_property("query_as_support_iou", float(np.mean(pred_iou)))
    record_property("support_self_reasoning_iou", float(np.mean(sr_iou)))
    assert all(0.0 <= v <= 1.0 for v in pred_iou + sr_iou)


def _iou(a, b):
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)
