import json
import os
import struct

import numpy as np
import pytest

from errors import InvalidArgumentError, ParseError, VersionMismatchError
from file_formats import (Annotation, Dataset, FeatureWindow, decode_checkpoint, decode_features,
                          encode_checkpoint, encode_features, load_checkpoint, read_annotations, read_classes,
                          read_dataset, read_detections, read_features, read_metrics, save_checkpoint,
                          write_annotations, write_classes, write_dataset, write_detections, write_features,
                          write_metrics)
from infer_eval import Detection
from tensor_autodiff import ParamStore


def windows(rng, count=3, dim=4, length=6):
    return [FeatureWindow(f"vid_{i}", 1.5 * i, 0.25, rng.standard_normal((dim, length)).astype(np.float32))
            for i in range(count)]


def test_features_round_trip_is_byte_identical(tmp_path, rng):
    path = str(tmp_path / 'features.tadf')
    original = windows(rng)
    write_features(path, original)
    loaded, dim, length = read_features(path)
    assert (dim, length) == (4, 6)
    assert [w.video_id for w in loaded] == ['vid_0', 'vid_1', 'vid_2']
    assert loaded[2].start == 3.0 and loaded[2].stride == 0.25
    assert np.array_equal(loaded[1].features, original[1].features)
    with open(path, 'rb') as f:
        assert f.read() == encode_features(loaded)


def test_zero_window_feature_file(tmp_path):
    path = str(tmp_path / 'empty.tadf')
    write_features(path, [], dim=3, length=16)
    loaded, dim, length = read_features(path)
    assert loaded == [] and (dim, length) == (3, 16)
    with pytest.raises(InvalidArgumentError):
        encode_features([])


def test_feature_file_rejects_trailing_bytes_and_truncation(rng):
    payload = encode_features(windows(rng))
    with pytest.raises(ParseError):
        decode_features(payload + b'\x00')
    with pytest.raises(ParseError):
        decode_features(payload[:-3])
    with pytest.raises(ParseError):
        decode_features(b'XXXX' + payload[4:])
    # mesmo comprimento do nome, bytes que não formam UTF-8
    with pytest.raises(ParseError):
        decode_features(payload.replace(b'vid_0', b'\xff\xfevid'))


def test_feature_file_rejects_mixed_shapes(rng):
    mixed = windows(rng) + [FeatureWindow('odd', 0.0, 1.0, np.zeros((4, 5), dtype=np.float32))]
    with pytest.raises(InvalidArgumentError):
        encode_features(mixed)


def test_annotations_round_trip(tmp_path):
    path = str(tmp_path / 'ann.jsonl')
    anns = [Annotation('v1', 0.5, 2.25, 'jump'), Annotation('v2', 1.0, 3.0, 'run')]
    write_annotations(path, anns)
    assert read_annotations(path, ['run', 'jump']) == anns
    with open(path) as f:
        assert '"t_start": 0.500000' in f.readline()


def test_annotations_reject_unknown_class_and_bad_interval(tmp_path):
    path = str(tmp_path / 'ann.jsonl')
    write_annotations(path, [Annotation('v1', 0.5, 2.25, 'swim')])
    with pytest.raises(ParseError) as info:
        read_annotations(path, ['run'])
    assert info.value.line == 1
    with open(path, 'w') as f:
        f.write('{"video_id": "v", "t_start": 2.0, "t_end": 1.0, "class": "run"}\n')
    with pytest.raises(ParseError):
        read_annotations(path, ['run'])
    with open(path, 'w') as f:
        f.write('{"video_id": "v", "t_start": "0", "t_end": 1.0, "class": "run"}\n')
    with pytest.raises(ParseError):
        read_annotations(path, ['run'])


def test_detections_round_trip_with_header(tmp_path):
    path = str(tmp_path / 'det.jsonl')
    dets = [Detection('v1', 0.0, 1.5, 1, 0.75, 'run'), Detection('v1', 2.0, 4.0, 2, 0.125, 'jump')]
    write_detections(path, dets, {'kind': 'detections', 'seed': 3})
    header, rows = read_detections(path, ['run', 'jump'])
    assert header == {'kind': 'detections', 'seed': 3}
    assert [(r['class'], r['score']) for r in rows] == [('run', 0.75), ('jump', 0.125)]
    with pytest.raises(ParseError):
        read_detections(path, ['run'])


def test_detections_reject_score_outside_unit_interval(tmp_path):
    path = str(tmp_path / 'det.jsonl')
    with open(path, 'w') as f:
        f.write('{"video_id": "v", "t_start": 0.0, "t_end": 1.0, "class": "run", "score": 1.5}\n')
    with pytest.raises(ParseError):
        read_detections(path, ['run'])


def test_header_must_be_first_line(tmp_path):
    path = str(tmp_path / 'metrics.jsonl')
    with open(path, 'w') as f:
        f.write('{"step": 1}\n{"header": {}}\n')
    with pytest.raises(ParseError):
        read_metrics(path)


def test_metrics_round_trip(tmp_path):
    path = str(tmp_path / 'metrics.jsonl')
    write_metrics(path, {'kind': 'metrics'}, [{'step': 1, 'L_total': 2.5}, {'step': 2, 'L_total': 2.0}])
    header, records = read_metrics(path)
    assert header == {'kind': 'metrics'}
    assert [r['step'] for r in records] == [1, 2]


def test_classes_file(tmp_path):
    path = str(tmp_path / 'classes.txt')
    write_classes(path, ['run', 'jump'])
    assert read_classes(path) == ['run', 'jump']
    with open(path, 'w') as f:
        f.write('run\nrun\n')
    with pytest.raises(ParseError):
        read_classes(path)


def test_dataset_round_trip(tmp_path, rng):
    data = Dataset(windows(rng, count=2), [Annotation('vid_0', 0.25, 1.0, 'run')], ['run'])
    paths = write_dataset(str(tmp_path / 'data'), data, {'seed': 1}, prefix='eval_')
    assert os.path.basename(paths['features']) == 'eval_features.tadf'
    with open(paths['manifest']) as f:
        assert json.load(f) == {'seed': 1}
    loaded = read_dataset(paths['features'], paths['annotations'], paths['classes'])
    assert loaded.annotations == data.annotations
    (segment, class_id), = loaded.ground_truths(loaded.windows[0])
    assert class_id == 1
    assert segment.start == pytest.approx(0.25 / 1.5)
    assert segment.end == pytest.approx(1.0 / 1.5)


def _params(rng):
    store = ParamStore()
    store.add('base.conv1.w', rng.standard_normal((2, 3, 3)))
    store.zeros('base.conv1.b', (2,))
    store.m['base.conv1.w'] += 0.5
    store.steps['base.conv1.w'] = 7
    return store


def test_checkpoint_round_trip(tmp_path, rng):
    path = str(tmp_path / 'model.dssd')
    params = _params(rng)
    meta = {'config': {'network': {'rho': 0.5}}, 'step': 7}
    save_checkpoint(path, params, meta)
    loaded_meta, loaded = load_checkpoint(path)
    assert loaded_meta == meta
    assert loaded.names() == params.names()
    assert np.array_equal(loaded['base.conv1.w'].data, params['base.conv1.w'].data)
    assert np.array_equal(loaded.m['base.conv1.w'], params.m['base.conv1.w'])
    assert loaded.steps['base.conv1.w'] == 7
    assert encode_checkpoint(loaded, loaded_meta) == encode_checkpoint(params, meta)


def test_checkpoint_version_mismatch(rng):
    payload = bytearray(encode_checkpoint(_params(rng), {}))
    struct.pack_into('<I', payload, 4, 99)
    with pytest.raises(VersionMismatchError) as info:
        decode_checkpoint(bytes(payload))
    assert info.value.found == 99
    assert info.value.exit_code == 4


def test_checkpoint_rejects_corruption(rng):
    payload = encode_checkpoint(_params(rng), {})
    with pytest.raises(ParseError):
        decode_checkpoint(b'NOPE' + payload[4:])
    with pytest.raises(ParseError):
        decode_checkpoint(payload[:-5])
    with pytest.raises(ParseError):
        decode_checkpoint(payload + b'\x01')


def test_atomic_write_leaves_no_temporary_files(tmp_path, rng):
    write_features(str(tmp_path / 'a.tadf'), windows(rng))
    write_features(str(tmp_path / 'a.tadf'), windows(rng, count=1))
    assert os.listdir(tmp_path) == ['a.tadf']
    assert len(read_features(str(tmp_path / 'a.tadf'))[0]) == 1
