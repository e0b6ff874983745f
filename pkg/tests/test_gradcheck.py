import numpy as np
import pytest

from dapmae.gradcheck import FAIL, NO_GRADIENT, OK, block_of, grad_check, relative_error


def test_relative_error_definition():
    a = np.array([1.0, -2.0, 0.5])
    assert relative_error(a, a) == 0.0
    assert relative_error(a, a + np.array([0.0, 0.02, 0.0])) == pytest.approx(0.02 / 2.0)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_block_names():
    assert block_of("hda.branches.face.fc1.weight") == "hda.branches.face.fc1"
    assert block_of("decoder.mask_token") == "decoder.mask_token"


def test_filtered_blocks_pass():
    r = grad_check(components=["head", "hda.mlp1", "dfg.class_token"], losses=["finetune"])
    assert r.passed and r.max_rel_err <= 1e-5
    assert {x.block for x in r.results} == {"head.fc1", "head.fc2", "hda.mlp1.fc1", "hda.mlp1.fc2", "dfg.class_token"}
    assert all(x.status == OK and x.max_abs_grad > 0 for x in r.results)


def test_frozen_block_reported_as_no_gradient():
    def freeze(loss, model):
        model.head.fc1.weight.requires_grad_(False)
        model.head.fc1.bias.requires_grad_(False)

    r = grad_check(components=["head", "hda.branches.object"], losses=["finetune"], instrument=freeze)
    assert r.passed
    assert r.status_of("head.fc1") == [NO_GRADIENT]
    assert r.status_of("hda.branches.object.bn") == [NO_GRADIENT]
    assert r.status_of("head.fc2") == [OK]


def test_corrupted_backward_rule_is_caught():
    def corrupt(loss, model):
        model.encoder.blocks[0].fc2.weight.register_hook(lambda g: g * 1.001)

    r = grad_check(components=["encoder.blocks.0.fc1", "encoder.blocks.0.fc2"], losses=["pretrain"],
                   instrument=corrupt)
    assert not r.passed
    assert [x.block for x in r.failures] == ["encoder.blocks.0.fc2"]
    assert r.status_of("encoder.blocks.0.fc1") == [OK]
    assert r.status_of("encoder.blocks.0.fc2") == [FAIL]


def test_unknown_loss_rejected():
    with pytest.raises(ValueError):
        grad_check(losses=["nope"])
