import numpy as np
import pytest

from errors import InvalidArgumentError
from losses import classification_loss, overlap_loss
from network import MODE_TOWERS, BranchOutputs, DecoupledDetector, fuse
from run_config import ABLATION_MODES
from tensor_autodiff import Tape, Tensor, backward


def features_for(config, rng):
    net = config.network
    return rng.standard_normal((net.input_dim, net.window_length))


def test_output_shapes(tiny_config, rng):
    net = tiny_config.network
    detector = DecoupledDetector(net, 'full', seed=0)
    out = detector.predict(features_for(tiny_config, rng))
    a = net.anchor_spec.num_anchors
    assert a == len(detector.anchors) == 14
    assert out.fused.probs.shape == (a, net.num_classes + 1)
    for t in (out.fused.overlap, out.fused.delta_c, out.fused.delta_w):
        assert t.shape == (a, 1)
    assert [m.length for m in out.maps['main']] == [4, 2, 1]
    assert [m.length for m in out.maps['cls']] == [4, 2, 1]
    assert np.allclose(out.fused.probs.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((out.fused.overlap.data >= 0) & (out.fused.overlap.data <= 1))


def test_wrong_feature_shape_is_rejected(tiny_config):
    detector = DecoupledDetector(tiny_config.network)
    with pytest.raises(InvalidArgumentError):
        detector.predict(np.zeros((3, 15)))


def test_unknown_mode_is_rejected(tiny_config):
    with pytest.raises(InvalidArgumentError):
        DecoupledDetector(tiny_config.network, 'main+everything')


def test_branch_missing_from_mode_is_rejected(tiny_config, rng):
    detector = DecoupledDetector(tiny_config.network, 'main+cls')
    tape = Tape()
    base = detector.base_forward(tape, Tensor(features_for(tiny_config, rng)))
    maps, _ = detector.main_stream_forward(tape, base)
    with pytest.raises(InvalidArgumentError):
        detector.refinement_branch_forward(tape, 'proposal', maps)


def test_fuse_of_identical_streams_is_identity(rng):
    probs = Tensor(rng.dirichlet(np.ones(3), size=6))
    branch = BranchOutputs(probs, Tensor(rng.uniform(size=(6, 1))), Tensor(rng.standard_normal((6, 1))),
                           Tensor(rng.standard_normal((6, 1))))
    fused = fuse(Tape(), branch, branch, branch)
    assert np.allclose(fused.probs.data, probs.data, atol=1e-15)
    assert np.allclose(fused.delta_w.data, branch.delta_w.data, atol=1e-15)


def test_fuse_rejects_misaligned_branches(rng):
    main = BranchOutputs(Tensor(np.full((4, 3), 1 / 3)))
    other = BranchOutputs(Tensor(np.full((5, 3), 1 / 3)))
    with pytest.raises(InvalidArgumentError):
        fuse(Tape(), main, other, None)


def test_fused_outputs_are_means_of_streams(tiny_config, rng):
    out = DecoupledDetector(tiny_config.network, 'full', seed=3).predict(features_for(tiny_config, rng))
    assert np.max(np.abs(out.fused.probs.data - (out.main.probs.data + out.cls.probs.data) / 2)) < 1e-12
    assert np.max(np.abs(out.fused.overlap.data - (out.main.overlap.data + out.prop.overlap.data) / 2)) < 1e-12
    assert np.max(np.abs(out.fused.delta_c.data - (out.main.delta_c.data + out.prop.delta_c.data) / 2)) < 1e-12


def test_missing_branch_keeps_main_stream(tiny_config, rng):
    out = DecoupledDetector(tiny_config.network, 'main+cls').predict(features_for(tiny_config, rng))
    assert out.has_cls and not out.has_prop
    assert np.array_equal(out.fused.overlap.data, out.main.overlap.data)
    out = DecoupledDetector(tiny_config.network, 'main_only').predict(features_for(tiny_config, rng))
    assert np.array_equal(out.fused.probs.data, out.main.probs.data)


def test_parameter_counts_per_mode(tiny_config):
    net = tiny_config.network
    full = DecoupledDetector(net, 'full', seed=0)
    main_only = DecoupledDetector(net, 'main_only', seed=0)
    tower_size = sum(full.params[name].data.size
                     for tower in ('cls', 'prop') for name in full.tower_parameters(tower))
    assert main_only.params.count() == full.params.count() - tower_size
    assert not any(name.startswith(('cls.', 'prop.', 'ref.')) for name in main_only.params.names())
    assert full.params.count() < 5000


def test_main_parameters_identical_across_modes(tiny_config):
    detectors = [DecoupledDetector(tiny_config.network, mode, seed=11) for mode in ABLATION_MODES]
    for name in detectors[0].params.names():
        for other in detectors[1:]:
            assert np.array_equal(detectors[0].params[name].data, other.params[name].data), name


def test_refinement_mode_has_both_heads_on_one_tower(tiny_config, rng):
    detector = DecoupledDetector(tiny_config.network, 'refinement')
    assert MODE_TOWERS['refinement'] == ('ref',)
    names = detector.tower_parameters('ref')
    assert any('.cls_head.' in n for n in names) and any('.prop_head.' in n for n in names)
    out = detector.predict(features_for(tiny_config, rng))
    assert out.has_cls and out.has_prop


def test_classification_loss_does_not_reach_proposal_branch(tiny_config, rng):
    detector = DecoupledDetector(tiny_config.network, 'full', seed=5)
    tape = Tape()
    out = detector.forward(tape, Tensor(features_for(tiny_config, rng)))
    a = len(detector.anchors)
    labels = rng.integers(0, 3, a)
    loss = classification_loss(tape, out.fused.probs, labels, np.arange(a))
    grads = backward(loss, tape, detector.params)
    for name in detector.tower_parameters('prop'):
        assert not np.any(grads[name]), name
    assert np.any(grads['cls.l0.cls_head.b'])


def test_localization_losses_do_not_reach_classification_branch(tiny_config, rng):
    detector = DecoupledDetector(tiny_config.network, 'full', seed=5)
    tape = Tape()
    out = detector.forward(tape, Tensor(features_for(tiny_config, rng)))
    a = len(detector.anchors)
    loss = overlap_loss(tape, out.fused.overlap, rng.uniform(size=a), np.arange(a))
    grads = backward(loss, tape, detector.params)
    for name in detector.tower_parameters('cls'):
        assert not np.any(grads[name]), name
    assert np.any(grads['prop.l0.prop_head.b'])


def test_zero_input_ignores_first_convolution_weights(tiny_config):
    net = tiny_config.network
    first = DecoupledDetector(net, 'full', seed=1)
    second = DecoupledDetector(net, 'full', seed=1)
    second.params['base.conv1.w'].data[...] = np.random.default_rng(99).standard_normal(
        second.params['base.conv1.w'].shape)
    zeros = np.zeros((net.input_dim, net.window_length))
    a, b = first.predict(zeros), second.predict(zeros)
    assert np.array_equal(a.fused.probs.data, b.fused.probs.data)
    assert np.array_equal(a.fused.delta_w.data, b.fused.delta_w.data)
