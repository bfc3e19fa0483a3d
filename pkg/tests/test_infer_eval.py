import itertools

import numpy as np
import pytest

from anchor_geometry import Anchor, AnchorSpec
from errors import InvalidArgumentError, StateError
from file_formats import Annotation, FeatureWindow, write_annotations, write_classes, write_detections
from infer_eval import (Detection, average_precision, detections_from_outputs, evaluate, evaluate_files,
                        infer, nms, postprocess, precision_envelope_area)
from network import DecoupledDetector
from run_config import InferenceConfig
from tensor_autodiff import ParamStore

CLASSES = ['a', 'b']


def window(video_id='v', length=10, stride=1.0):
    return FeatureWindow(video_id, 0.0, stride, np.zeros((1, length), dtype=np.float32))


def det(start, end, score, video_id='v', class_id=1):
    return Detection(video_id, start, end, class_id, score, CLASSES[class_id - 1])


def gt(start, end, video_id='v', label='a'):
    return Annotation(video_id, start, end, label)


# ------------------------------------------------------------ decodificação

def _decode(probs, deltas=None, **inference):
    anchors = [Anchor(0, 0, 1.0, 0.5, 0.2), Anchor(0, 1, 1.0, 0.3, 0.4)]
    n = len(anchors)
    dc, dw = deltas if deltas is not None else (np.zeros(n), np.zeros(n))
    return detections_from_outputs(window(), np.array(probs), np.full(n, 0.5), dc, dw, anchors,
                                   AnchorSpec(), InferenceConfig(**inference), CLASSES)


def test_background_argmax_is_suppressed():
    dets = _decode([[0.9, 0.05, 0.05], [0.2, 0.3, 0.5]])
    assert len(dets) == 1
    assert dets[0].class_id == 2 and dets[0].score == 0.5


def test_zero_deltas_give_the_anchor_segment_in_seconds():
    (d,) = _decode([[0.1, 0.8, 0.1], [1.0, 0.0, 0.0]])
    assert d.t_start == pytest.approx(4.0)
    assert d.t_end == pytest.approx(6.0)
    assert d.label == 'a'


def test_center_offset_moves_the_segment():
    (d,) = _decode([[0.1, 0.8, 0.1], [1.0, 0.0, 0.0]], deltas=(np.array([1.0, 0.0]), np.zeros(2)))
    # centro 0.52 em uma janela de 10 s
    assert (d.t_start + d.t_end) / 2 == pytest.approx(5.2)


def test_score_with_overlap_and_min_score():
    (d,) = _decode([[0.1, 0.8, 0.1], [1.0, 0.0, 0.0]], score_with_overlap=True)
    assert d.score == pytest.approx(0.4)
    assert _decode([[0.1, 0.8, 0.1], [1.0, 0.0, 0.0]], min_score=0.9) == []


def test_segments_are_clipped_to_the_window():
    (d,) = _decode([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], deltas=(np.zeros(2), np.array([0.0, 20.0])))
    assert d.t_start == 0.0 and d.t_end <= 10.0


def test_infer_without_parameters_is_state_error(tiny_config):
    detector = DecoupledDetector(tiny_config.network, 'main_only', params=ParamStore())
    with pytest.raises(StateError):
        infer(window(), detector, tiny_config, CLASSES)
    with pytest.raises(StateError):
        infer(window(), None, tiny_config, CLASSES)


def test_detection_rejects_background_and_bad_scores():
    with pytest.raises(InvalidArgumentError):
        Detection('v', 0.0, 1.0, 0, 0.5)
    with pytest.raises(InvalidArgumentError):
        Detection('v', 0.0, 1.0, 1, 1.5)


# ---------------------------------------------------------------------- NMS

def test_nms_examples():
    kept = nms([det(0, 10, 0.9), det(1, 11, 0.8)], 0.2)
    assert kept == [det(0, 10, 0.9)]
    kept = nms([det(0, 10, 0.9), det(20, 30, 0.8)], 0.2)
    assert len(kept) == 2
    kept = nms([det(0, 10, 0.9), det(1, 11, 0.8, class_id=2)], 0.2)
    assert len(kept) == 2
    assert nms([], 0.5) == []


def test_nms_tie_break_prefers_earlier_start():
    kept = nms([det(1, 11, 0.9), det(0, 10, 0.9)], 0.2)
    assert kept == [det(0, 10, 0.9)]


def test_nms_rejects_threshold_outside_unit_interval():
    with pytest.raises(InvalidArgumentError):
        nms([det(0, 1, 0.5)], 1.0)


def _iou(a, b):
    inter = max(0.0, min(a.t_end, b.t_end) - max(a.t_start, b.t_start))
    return inter / (max(a.t_end, b.t_end) - min(a.t_start, b.t_start))


def test_nms_agrees_with_brute_force(rng):
    for _ in range(200):
        dets = []
        for _ in range(int(rng.integers(0, 12))):
            s = float(rng.uniform(0, 50))
            dets.append(det(s, s + float(rng.uniform(1, 20)), float(rng.uniform()),
                            class_id=int(rng.integers(1, 3))))
        kept = nms(dets, 0.3)
        assert nms(kept, 0.3) == kept
        for a, b in itertools.combinations(kept, 2):
            if a.class_id == b.class_id:
                assert _iou(a, b) <= 0.3
        for d in dets:
            if d not in kept:
                assert any(k.class_id == d.class_id and k.score >= d.score and _iou(k, d) > 0.3 for k in kept)


def test_postprocess_caps_detections_per_video():
    dets = [det(10 * i, 10 * i + 5, 0.5 + i / 100, video_id=v) for v in ('y', 'x') for i in range(5)]
    final = postprocess(dets, InferenceConfig(max_detections_per_video=3))
    assert [d.video_id for d in final] == ['x'] * 3 + ['y'] * 3
    assert final[0].score > final[1].score > final[2].score


# ----------------------------------------------------------------------- AP

def test_precision_envelope_area():
    assert precision_envelope_area(np.array([0.5, 0.5, 1.0]), np.array([1.0, 0.5, 2 / 3])) == pytest.approx(5 / 6)


def test_average_precision_examples():
    gts = [gt(0, 10), gt(20, 30)]
    ranked = [det(0, 10, 0.9), det(40, 50, 0.8), det(20, 30, 0.7)]
    assert average_precision(ranked, gts, 0.5) == pytest.approx(5 / 6)
    assert average_precision([det(0, 10, 0.9), det(20, 30, 0.8)], gts, 0.5) == pytest.approx(1.0)
    assert average_precision([det(40, 50, 0.9)], gts, 0.5) == 0.0
    assert average_precision([], gts, 0.5) == 0.0
    assert average_precision(ranked, [], 0.5) == 0.0


def test_duplicate_detection_counts_as_false_positive():
    gts = [gt(0, 10)]
    assert average_precision([det(0, 10, 0.9), det(0, 10, 0.8)], gts, 0.5) == pytest.approx(1.0)
    # a duplicata de maior score não pode roubar o ground truth de outro vídeo
    assert average_precision([det(0, 10, 0.9, video_id='w'), det(0, 10, 0.8)], gts, 0.5) == pytest.approx(0.5)


def test_evaluate_empty_ground_truth_gives_zero():
    result = evaluate([det(0, 10, 0.9)], [], CLASSES)
    assert list(result.mean_ap) == [0.0] * 5
    assert result.table().index.tolist() == ['mAP']


def test_evaluate_perfect_and_order_invariant(rng):
    anns = [gt(0, 10), gt(20, 30, label='b'), gt(5, 9, video_id='w')]
    dets = [det(0, 10, 0.9), det(20, 30, 0.8, class_id=2), det(5, 9, 0.7, video_id='w'),
            det(40, 45, 0.1, class_id=2)]
    result = evaluate(dets, anns, CLASSES)
    assert result.map_at(0.5) == pytest.approx((1.0 + 1.0) / 2)
    assert list(result.table().columns) == ['0.3', '0.4', '0.5', '0.6', '0.7']
    shuffled = [dets[i] for i in rng.permutation(len(dets))]
    again = evaluate(shuffled, anns, CLASSES, threads=3)
    assert np.array_equal(result.mean_ap.values, again.mean_ap.values)


def test_classes_without_ground_truth_are_excluded_from_mean():
    result = evaluate([det(0, 10, 0.9), det(0, 10, 0.9, class_id=2)], [gt(0, 10)], CLASSES)
    assert result.ap.index.tolist() == ['a']
    assert result.map_at(0.7) == 1.0


def _brute_force_ap(dets, gts, threshold):
    ordered = sorted(dets, key=lambda d: (-d.score, d.video_id, d.t_start, d.t_end))
    used = set()
    hits = []
    for d in ordered:
        best, best_iou = None, -1.0
        for i, g in enumerate(gts):
            if i in used or g.video_id != d.video_id:
                continue
            value = _iou(d, g)
            if value > best_iou:
                best, best_iou = i, value
        if best is not None and best_iou >= threshold:
            used.add(best)
            hits.append(1)
        else:
            hits.append(0)
    ap = 0.0
    for k in range(len(ordered)):
        if hits[k]:
            ap += max(sum(hits[:j + 1]) / (j + 1) for j in range(k, len(ordered))) / len(gts)
    return ap


def test_average_precision_agrees_with_brute_force(rng):
    for _ in range(100):
        gts = []
        for _ in range(int(rng.integers(1, 5))):
            s = float(rng.uniform(0, 40))
            gts.append(gt(s, s + float(rng.uniform(2, 10)), video_id=str(rng.integers(2))))
        dets = []
        for _ in range(int(rng.integers(0, 8))):
            s = float(rng.uniform(0, 40))
            dets.append(det(s, s + float(rng.uniform(2, 10)), float(rng.uniform()), video_id=str(rng.integers(2))))
        assert average_precision(dets, gts, 0.5) == pytest.approx(_brute_force_ap(dets, gts, 0.5), abs=1e-12)


def test_evaluate_files(tmp_path):
    write_classes(str(tmp_path / 'classes.txt'), CLASSES)
    write_annotations(str(tmp_path / 'gt.jsonl'), [gt(0, 10), gt(20, 30, label='b')])
    write_detections(str(tmp_path / 'det.jsonl'), [det(0, 10, 0.9), det(20, 30, 0.4, class_id=2)],
                     {'kind': 'detections', 'config': {'train': {'seed': 3}}, 'seed': 3})
    result = evaluate_files(str(tmp_path / 'det.jsonl'), str(tmp_path / 'gt.jsonl'), str(tmp_path / 'classes.txt'),
                            [0.5])
    assert result.map_at(0.5) == pytest.approx(1.0)
    assert result.to_dict()['mAP'] == {'0.5': 1.0}
    header = result.header(detections='det.jsonl')
    assert header['kind'] == 'evaluation' and header['seed'] == 3
    assert header['config'] == {'train': {'seed': 3}}
    assert header['interpolation'] == 'all-point precision envelope'
    assert header['detections'] == 'det.jsonl'
