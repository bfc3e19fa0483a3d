import os
from dataclasses import replace

import numpy as np
import pytest

from config import RUNTIME_CONFIG
from errors import ConsistencyError, DivergenceError, InvalidArgumentError
from file_formats import Dataset, read_metrics, save_checkpoint
from infer_eval import evaluate, infer_dataset
from network import DecoupledDetector
from run_config import ABLATION_MODES, RunConfig
from synthetic import generate_synthetic, generate_train_eval
from trainer import Trainer, artifact_header, load_detector, run_ablation, train


@pytest.fixture
def config(tiny_config):
    return tiny_config.with_overrides(train={'batch_size': 2, 'epochs': 2, 'learning_rate': 1e-3})


@pytest.fixture
def data(config):
    return generate_synthetic(replace(config.synthetic, num_videos=3))


def test_training_is_independent_of_thread_count(config, data):
    single = train(config, data, max_steps=3, threads=1)
    threaded = train(config, data, max_steps=3, threads=3)
    assert single.records == threaded.records
    for name in single.detector.params.names():
        assert np.array_equal(single.detector.params[name].data, threaded.detector.params[name].data), name


def test_artifacts_do_not_depend_on_worker_count(config, data, tmp_path, monkeypatch):
    train(config, data, str(tmp_path / 'one'))
    monkeypatch.setitem(RUNTIME_CONFIG, 'threads', 3)
    train(config, data, str(tmp_path / 'three'))
    assert 'threads' not in config.to_dict()['train']
    for name in ('metrics.jsonl', 'checkpoint.dssd'):
        with open(tmp_path / 'one' / name, 'rb') as a, open(tmp_path / 'three' / name, 'rb') as b:
            assert a.read() == b.read(), name


def test_steps_per_epoch_and_records(config, data):
    result = train(config, data)
    # 3 janelas em lotes de 2 -> 2 passos por época
    assert result.steps == 4
    assert [r['epoch'] for r in result.records] == [0, 0, 1, 1]
    assert all(np.isfinite(r['L_total']) for r in result.records)


def test_main_only_trains_without_branch_parameters(config, data):
    result = train(config.with_overrides(train={'ablation_mode': 'main_only'}), data, max_steps=1)
    assert not any(n.startswith(('cls.', 'prop.', 'ref.')) for n in result.detector.params.names())
    assert result.records[0]['L_cls_c'] == 0.0


def test_checkpoint_and_metrics_are_written_and_loadable(config, data, tmp_path):
    out_dir = str(tmp_path / 'model')
    result = train(config, data, out_dir)
    loaded_config, detector, meta = load_detector(result.checkpoint_path)
    assert loaded_config == config
    assert meta['class_names'] == data.class_names
    assert meta['step'] == result.steps
    for name in detector.params.names():
        assert np.array_equal(detector.params[name].data, result.detector.params[name].data)
        assert detector.params.steps[name] == result.steps
    header, records = read_metrics(os.path.join(out_dir, 'metrics.jsonl'))
    assert header['kind'] == 'metrics' and header['seed'] == config.train.seed
    assert len(records) == result.steps


def test_load_detector_rejects_parameters_of_another_mode(config, tmp_path):
    path = str(tmp_path / 'bad.dssd')
    params = DecoupledDetector(config.network, 'main_only').params
    save_checkpoint(path, params, artifact_header(config, 'checkpoint'))
    with pytest.raises(ConsistencyError):
        load_detector(path)


def test_divergence_names_the_tensor(config, data):
    trainer = Trainer(config, data)
    trainer.detector.params['main.l0.head.b'].data[:] = np.nan
    with pytest.raises(DivergenceError) as info:
        trainer.run(max_steps=1)
    assert info.value.tensor_name is not None
    assert info.value.exit_code == 3


def test_empty_or_misshaped_training_data_is_rejected(config, data):
    with pytest.raises(InvalidArgumentError):
        Trainer(config, Dataset([], [], data.class_names))
    other = config.with_overrides(network={'input_dim': 5}, synthetic={})
    with pytest.raises(InvalidArgumentError):
        Trainer(other, data)


def test_short_overfit_lowers_the_loss(tiny_config):
    config = tiny_config.with_overrides(train={'learning_rate': 1e-2, 'epochs': 60, 'batch_size': 1})
    data = generate_synthetic(replace(config.synthetic, num_videos=1))
    result = train(config, data)
    losses = [r['L_total'] for r in result.records]
    assert np.mean(losses[-5:]) < losses[0]


@pytest.mark.slow
def test_long_overfit_on_single_window(tiny_config):
    config = tiny_config.with_overrides(train={'learning_rate': 1e-3, 'epochs': 2000, 'batch_size': 1})
    data = generate_synthetic(replace(config.synthetic, num_videos=1))
    result = train(config, data)
    assert result.records[-1]['L_total'] < 1e-2
    detections = infer_dataset(data.windows, result.detector, config, data.class_names)
    scores = evaluate(detections, data.annotations, data.class_names, [0.5, 0.8])
    assert scores.map_at(0.5) == 1.0
    assert scores.map_at(0.8) == 1.0


def test_ablation_table_has_one_row_per_mode(config, data, tmp_path):
    eval_data = generate_synthetic(replace(config.synthetic, num_videos=2), seed=99, prefix='synth_eval')
    table = run_ablation(config, data, eval_data, str(tmp_path / 'ablation'), max_steps=1)
    assert list(table['mode']) == list(ABLATION_MODES)
    assert list(table.columns) == ['mode', 'mAP@0.5', 'parameters']
    assert table['mAP@0.5'].between(0.0, 1.0).all()
    counts = dict(zip(table['mode'], table['parameters']))
    assert counts['main_only'] < counts['main+cls'] < counts['full']
    assert os.path.exists(tmp_path / 'ablation' / 'main_cls' / 'checkpoint.dssd')


@pytest.mark.slow
def test_ablation_trend_on_default_benchmark():
    config = RunConfig.default()
    table = run_ablation(config, *generate_train_eval(config.synthetic))
    scores = dict(zip(table['mode'], table['mAP@0.5']))
    for single in ('main+prop', 'main+cls'):
        assert scores['full'] >= scores[single] >= scores['main_only'], single
    assert scores['refinement'] >= scores['main_only']
    assert scores['full'] - scores['main_only'] >= 0.02
