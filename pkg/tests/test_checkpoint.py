import json
import struct

import numpy as np
import pytest
import torch

from dapmae.checkpoint import decode, encode, load_checkpoint, restore_model, rng_state, save_checkpoint
from dapmae.config import tiny_config
from dapmae.data import FormatError, gen_corpus, object_task_corpus
from dapmae.model import prepare
from dapmae.trainer import finetune, fresh_checkpoint, pretrain


@pytest.fixture(scope="module")
def finetuned():
    cfg = tiny_config(precision="float32", **{"schedule.epochs": 1})
    pre, _ = pretrain(cfg, gen_corpus({"object": 3, "face": 3, "scene": 3}, 32))
    ft, _ = finetune(cfg.copy(phase="finetune"), pre, object_task_corpus(6, 32, 1), max_steps=3)
    return cfg, ft


def _probe_logits(ckpt, cfg):
    model = restore_model(ckpt)
    model.eval()
    clouds = object_task_corpus(3, 32, seed=9).clouds
    prep = prepare(np.stack([c.points for c in clouds]), [0, 0, 0], cfg)
    with torch.no_grad():
        return model.logits(prep, "object")


def test_save_load_forward_bit_identical(tmp_path, finetuned):
    cfg, ft = finetuned
    n = save_checkpoint(ft, tmp_path / "a.dapm")
    assert n == (tmp_path / "a.dapm").stat().st_size
    back = load_checkpoint(tmp_path / "a.dapm")
    assert back.tensors.keys() == ft.tensors.keys()
    assert all(np.array_equal(back.tensors[p], ft.tensors[p]) for p in ft.tensors)
    assert torch.equal(_probe_logits(back, cfg), _probe_logits(ft, cfg))
    assert torch.equal(rng_state(back), rng_state(ft))
    assert (back.phase, back.hda_mode, back.n_classes) == ("finetune", "fusion", 4)
    # re-encoding is byte-stable
    assert encode(back) == encode(ft)


def test_bn_statistics_round_trip(finetuned):
    _, ft = finetuned
    back = decode(encode(ft))
    assert ft.kinds["hda.branches.face.bn.running_var"] == "buffer"
    assert np.array_equal(back.tensors["hda.branches.face.bn.running_var"],
                          ft.tensors["hda.branches.face.bn.running_var"])


def test_rejects_corruption_with_offsets(finetuned):
    _, ft = finetuned
    raw = encode(ft)
    with pytest.raises(FormatError) as info:
        decode(b"XXXX" + raw[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError) as info:
        decode(raw[:4] + struct.pack("<I", 9) + raw[8:])
    assert info.value.offset == 4
    with pytest.raises(FormatError) as info:
        decode(raw[:-7])
    assert info.value.offset == len(raw) - 7
    with pytest.raises(FormatError) as info:
        decode(raw[:30])
    assert info.value.offset == 30


def test_unknown_parameter_path_rejected(finetuned):
    cfg, ft = finetuned
    raw = encode(ft)
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    header["tensors"][0]["path"] = "bogus.weight"
    hb = json.dumps(header).encode()
    bad = raw[:8] + struct.pack("<I", len(hb)) + hb + raw[12 + hlen:]
    with pytest.raises(FormatError, match="unknown parameter path"):
        restore_model(decode(bad))


def test_fresh_checkpoint_is_adaptation_mode():
    ck = fresh_checkpoint(tiny_config())
    assert ck.hda_mode == "adaptation" and ck.epoch == 0 and ck.n_classes is None
    paths = ck.parameter_paths()
    assert len(paths) == len(set(paths))
