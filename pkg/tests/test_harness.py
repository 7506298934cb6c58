import csv

import numpy as np
import pytest

from flowssc.flow.train import draw_batch
from flowssc.harness import pipeline
from flowssc.harness.checkpoint import Checkpoint, CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from flowssc.harness.cli import main
from flowssc.harness.config import ConfigError, RunConfig, dump_config, load_config, to_dict
from flowssc.synth import read_dataset

SMOKE = [
    "data.scenes=12", "codec.iterations=3", "codec.eval_every=2", "codec.eval_scenes=2",
    "flow.iterations=3", "flow.batch_size=2", "flow.augment=false", "flow.warmup=1",
    "eval.steps=[1,2]", "eval.scenes=3",
]


def run(out, *args, extra=()):
    sets = [f"output_dir={out}", *SMOKE, *extra]
    argv = list(args)
    for s in sets:
        argv += ["--set", s]
    return main(argv)


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    for cmd in ("gen-data", "train-codec", "train-flow"):
        assert run(out, cmd) == 0
    return out


# -- config ---------------------------------------------------------------

def test_config_defaults_validate():
    cfg = load_config()
    assert cfg.flow.fraction == 0.25 and cfg.flow.resolution == 128
    assert cfg.codec.lambda_geo == cfg.codec.lambda_sem == 0.5


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, ["codec.widht=3"])
    p = tmp_path / "c.yaml"
    p.write_text("flow:\n  iterations: 5\n  bogus: 1\n")
    with pytest.raises(ConfigError, match="flow.bogus"):
        load_config(p)


def test_type_errors_rejected():
    assert load_config(None, ["flow.lr=3e-4"]).flow.lr == 3e-4
    for bad in ("codec.iterations=ten", "codec.lr=fast", "flow.augment=3", "data.dims=[1,2]", "eval.n_steps=3"):
        with pytest.raises(ConfigError):
            load_config(None, [bad])


def test_override_and_dump_roundtrip(tmp_path):
    cfg = load_config(None, ["seed=7", "flow.lr=0.01", "eval.steps=[1,4]"])
    assert (cfg.seed, cfg.flow.lr, cfg.eval.steps) == (7, 0.01, (1, 4))
    dump_config(cfg, tmp_path / "r.yaml")
    again = load_config(tmp_path / "r.yaml")
    assert again == cfg
    # every field is written, so nothing depends on defaults at reload time
    text = (tmp_path / "r.yaml").read_text()
    for section, values in to_dict(RunConfig()).items():
        if isinstance(values, dict):
            for key in values:
                assert f"{key}:" in text


# -- checkpoint format -----------------------------------------------------

def _ckpt():
    r = np.random.default_rng(0)
    return Checkpoint(bytes(range(32)), {
        "param.w": r.standard_normal((3, 4)).astype(np.float32),
        "param.b": r.standard_normal(4),
        "opt.step": np.array([5], dtype=np.int64),
        "mask": np.array([1, 0, 1], dtype=np.uint8),
        "scalar": np.array(2.5, dtype=np.float32),
    }, {"iteration": 5})


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ck = _ckpt()
    save_checkpoint(tmp_path / "a.ckpt", ck)
    loaded = load_checkpoint(tmp_path / "a.ckpt", ck.digest)
    for k, v in ck.tensors.items():
        assert loaded.tensors[k].dtype == v.dtype
        assert loaded.tensors[k].tobytes() == v.tobytes() and loaded.tensors[k].shape == v.shape
    assert loaded.meta == {"iteration": 5}
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert set(loaded.group("param")) == {"w", "b"}


def test_checkpoint_header_layout():
    blob = encode(_ckpt())
    assert blob[:4] == b"FSSC"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert blob[6:38] == bytes(range(32))
    assert int.from_bytes(blob[38:42], "little") == 6  # five tensors plus metadata


def test_every_single_byte_corruption_detected():
    blob = encode(_ckpt())
    for i in range(len(blob)):
        for flip in (0x01, 0x80):
            bad = bytearray(blob)
            bad[i] ^= flip
            with pytest.raises(CheckpointError):
                decode(bytes(bad))


def test_truncation_detected():
    blob = encode(_ckpt())
    for n in (0, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointError):
            decode(blob[:n])


def test_digest_mismatch():
    blob = encode(_ckpt())
    with pytest.raises(CheckpointError, match="different model configuration"):
        decode(blob, bytes(32))


def test_unsupported_dtype_rejected():
    with pytest.raises(CheckpointError):
        encode(Checkpoint(bytes(32), {"x": np.zeros(2, dtype=np.complex64)}))


# -- commands --------------------------------------------------------------

def test_smoke_outputs(smoke):
    for name in ("data.voxd", "codec.ckpt", "codec_log.csv", "codec_best.ckpt", "flow.ckpt", "flow_log.csv",
                 "config.resolved.yaml"):
        assert (smoke / name).exists(), name
    with open(smoke / "flow_log.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["iteration", "fm_loss", "sc_loss", "total"]
    assert len(rows) == 3


def test_gen_data_census_and_reproducibility(smoke, tmp_path):
    records, header = read_dataset(smoke / "data.voxd")
    assert len(records) == 12 and header.num_classes == 5 and header.count == 12
    assert run(tmp_path, "gen-data") == 0
    assert (tmp_path / "data.voxd").read_bytes() == (smoke / "data.voxd").read_bytes()


def test_commands_are_byte_identical_on_rerun(smoke):
    before = {n: (smoke / n).read_bytes() for n in ("codec.ckpt", "codec_log.csv", "flow.ckpt", "flow_log.csv")}
    assert run(smoke, "train-codec") == 0
    assert run(smoke, "train-flow") == 0
    for n, blob in before.items():
        assert (smoke / n).read_bytes() == blob, n


def test_refine_one_step_single_call_per_scene(smoke):
    cfg = load_config(None, [f"output_dir={smoke}", *SMOKE])
    codec, _ = pipeline.load_codec(cfg)
    net, _ = pipeline.load_net(cfg)
    _, coarse = pipeline.eval_subset(cfg, pipeline.load_splits(cfg))
    out = pipeline.refine(codec, net, coarse, 1, cfg.seed)
    assert out.net_evaluations == len(coarse)
    assert out.predictions.shape == coarse.shape
    again = pipeline.refine(codec, net, coarse, 1, cfg.seed)
    assert np.array_equal(out.predictions, again.predictions)


def test_refine_and_ablation_tables(smoke, capsys):
    assert run(smoke, "refine") == 0
    assert "2 network evaluations" in capsys.readouterr().out
    rows = list(csv.DictReader(open(smoke / "refiner_ablation.csv")))
    assert [r["variant"] for r in rows] == ["coarse", "refined", "delta"]
    records, _ = read_dataset(smoke / "refined_1step.voxd")
    assert len(records) == 2 and records[0][0].shape == (32, 32, 8)
    assert run(smoke, "ablate-steps") == 0
    rows = list(csv.DictReader(open(smoke / "steps_ablation.csv")))
    assert [r["variant"] for r in rows] == ["1", "2"]


def test_resume_continues_iteration_count(smoke):
    assert run(smoke, "train-codec", "--resume", extra=["codec.iterations=5"]) == 0
    ck = load_checkpoint(smoke / "codec.ckpt")
    assert ck.meta["iteration"] == 5
    rows = list(csv.DictReader(open(smoke / "codec_log.csv")))
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2, 3, 4]  # appended after the first run
    # restore the three-iteration checkpoint for later tests
    assert run(smoke, "train-codec") == 0


def test_flow_rows_are_a_quarter_consistency():
    cfg = load_config().flow_train_config()
    gt = np.zeros((4, 96, 16), dtype=np.float32)
    share = np.mean([draw_batch(gt, gt, cfg, it).is_sc.mean() for it in range(1000)])
    assert abs(share - 0.25) < 0.02


def test_exit_codes(smoke, tmp_path):
    assert run(tmp_path, "train-codec", extra=["codec.nope=1"]) == 2
    assert run(tmp_path, "train-codec") == 3  # no dataset yet
    assert run(smoke, "refine", "--steps", "3") == 2
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "data.voxd").write_bytes((smoke / "data.voxd").read_bytes())
    blob = bytearray((smoke / "codec.ckpt").read_bytes())
    blob[100] ^= 0xFF
    (bad / "codec.ckpt").write_bytes(bytes(blob))
    assert run(bad, "refine") == 3


def test_digest_mismatch_exit_code(smoke, tmp_path):
    out = tmp_path / "other"
    out.mkdir()
    for n in ("data.voxd", "codec.ckpt", "flow.ckpt"):
        (out / n).write_bytes((smoke / n).read_bytes())
    assert run(out, "refine", extra=["flow.depth=2"]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(smoke, tmp_path):
    out = tmp_path / "nan"
    out.mkdir()
    (out / "data.voxd").write_bytes((smoke / "data.voxd").read_bytes())
    assert run(out, "train-codec", extra=["codec.lr=1e30", "codec.grad_clip=1e30", "codec.warmup=0"]) == 4
