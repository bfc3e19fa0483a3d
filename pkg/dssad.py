#!/usr/bin/env python3
"""
Detector temporal de ações de disparo único com ramos desacoplados - linha de comando

Uso:
    python dssad.py synth [CONFIG] [OUT_DIR]
    python dssad.py train CONFIG FEATURES ANNOTATIONS CLASSES [OUT_DIR]
    python dssad.py infer CHECKPOINT FEATURES OUT [CONFIG]
    python dssad.py eval DETECTIONS ANNOTATIONS CLASSES [THRESHOLDS] [OUT_JSON]
    python dssad.py gradcheck [CONFIG] [SEED]
    python dssad.py ablate [CONFIG] [DATA_DIR] [OUT_DIR] [MAX_STEPS]

CONFIG pode ser '-' para os valores padrão.
"""

import json
import logging
import os
import sys
from typing import List, Optional

sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from config import LOGGING_CONFIG, RUNTIME_CONFIG
from errors import DetectorError
from file_formats import atomic_write, read_dataset, read_features, write_dataset, write_detections
from gradcheck import check_gradients
from infer_eval import evaluate_files, infer_dataset
from run_config import RunConfig, load_config
from synthetic import generate_train_eval
from trainer import artifact_header, load_detector, run_ablation, train

USAGE = [
    "Comandos disponíveis:",
    "  synth [config] [out_dir] - Gera conjunto sintético (treino + avaliação)",
    "  train CONFIG FEATURES ANNOTATIONS CLASSES [out_dir] - Treina e grava checkpoint",
    "  infer CHECKPOINT FEATURES OUT [config] - Gera detecções (JSON lines)",
    "  eval DETECTIONS ANNOTATIONS CLASSES [thresholds] [out_json] - Tabela de mAP",
    "  gradcheck [config] [seed] - Checagem de gradientes (configuração mínima)",
    "  ablate [config] [data_dir] [out_dir] [max_steps] - Tabela de ablação por modo",
]


class UsageError(DetectorError):
    """Argumentos de linha de comando inválidos"""


def setup_logging():
    """Configura sistema de logging com cores no terminal"""
    if logging.getLogger().handlers:
        return

    class ColorFormatter(logging.Formatter):
        COLOR_CODES = {
            'DEBUG': '\033[37m',   # Cinza
            'INFO': '\033[32m',    # Verde
            'WARNING': '\033[33m', # Amarelo
            'ERROR': '\033[31m',   # Vermelho
            'CRITICAL': '\033[41m' # Fundo vermelho
        }
        RESET = '\033[0m'

        def format(self, record):
            color = self.COLOR_CODES.get(record.levelname, self.RESET)
            message = super().format(record)
            return f"{color}{message}{self.RESET}"

    log_format = LOGGING_CONFIG.get('format', '%(asctime)s - %(levelname)s - %(message)s')
    level = getattr(logging, LOGGING_CONFIG.get('level', 'INFO'))

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(ColorFormatter(log_format))

    file_handler = logging.FileHandler(LOGGING_CONFIG['log_file'])
    file_handler.setFormatter(logging.Formatter(log_format))

    logging.basicConfig(
        level=level,
        handlers=[console_handler, file_handler]
    )


def _arg(args: List[str], index: int, default=None):
    if len(args) > index and args[index] != '-':
        return args[index]
    return default


def _require(args: List[str], count: int, usage: str):
    if len(args) < count:
        raise UsageError(f"uso: python dssad.py {usage}")


def _config(path: Optional[str], preset: str = 'default') -> RunConfig:
    if path is None:
        return RunConfig.tiny() if preset == 'tiny' else RunConfig.default()
    return load_config(path)


def _int_arg(raw: Optional[str], name: str) -> Optional[int]:
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{name} deve ser inteiro: {raw!r}")


# ------------------------------------------------------------------ comandos

def cli_synth(args: List[str]) -> int:
    config = _config(_arg(args, 0))
    out_dir = _arg(args, 1, RUNTIME_CONFIG['out_dir'])
    spec = config.synthetic
    train_set, eval_set = generate_train_eval(spec)
    for prefix, dataset, split in (('', train_set, 'train'), ('eval_', eval_set, 'eval')):
        manifest = artifact_header(config, 'synthetic', split=split, feature_dim=spec.feature_dim,
                                   window_length=spec.window_length, num_windows=len(dataset.windows),
                                   num_annotations=len(dataset.annotations))
        paths = write_dataset(out_dir, dataset, manifest, prefix)
        logging.info(f"Conjunto {split}: {paths['features']}")
    return 0


def cli_train(args: List[str]) -> int:
    _require(args, 4, "train CONFIG FEATURES ANNOTATIONS CLASSES [out_dir]")
    config = _config(_arg(args, 0))
    data = read_dataset(args[1], args[2], args[3])
    out_dir = _arg(args, 4, RUNTIME_CONFIG['out_dir'])
    result = train(config, data, out_dir)
    logging.info(f"Treino concluído: {result.steps} passos, perda final {result.final_loss:.6f}")
    logging.info(f"Checkpoint: {result.checkpoint_path}; métricas: {result.metrics_path}")
    return 0


def cli_infer(args: List[str]) -> int:
    _require(args, 3, "infer CHECKPOINT FEATURES OUT [config]")
    config, detector, meta = load_detector(args[0])
    override = _arg(args, 3)
    if override is not None:
        config = config.with_overrides(inference=load_config(override).sections['inference'])
    windows, _, _ = read_features(args[1])
    class_names = meta.get('class_names') or [f"action_{c:02d}" for c in range(1, config.network.num_classes + 1)]
    detections = infer_dataset(windows, detector, config, class_names, RUNTIME_CONFIG['threads'])
    header = artifact_header(config, 'detections', checkpoint=os.path.basename(args[0]),
                             class_names=class_names)
    write_detections(args[2], detections, header)
    logging.info(f"{len(detections)} detecções gravadas em {args[2]}")
    return 0


def cli_eval(args: List[str]) -> int:
    _require(args, 3, "eval DETECTIONS ANNOTATIONS CLASSES [thresholds] [out_json]")
    raw = _arg(args, 3)
    thresholds = RunConfig.default().inference.eval_thresholds
    if raw is not None:
        try:
            thresholds = [float(t) for t in raw.split(',') if t.strip()]
        except ValueError:
            raise UsageError(f"limiares inválidos: {raw!r}")
    result = evaluate_files(args[0], args[1], args[2], thresholds)
    print(result.format_table())
    out = _arg(args, 4)
    if out is not None:
        payload = {'header': result.header(detections=args[0], annotations=args[1])}
        payload.update(result.to_dict())
        atomic_write(out, json.dumps(payload, sort_keys=True, indent=2) + '\n')
    return 0


def cli_gradcheck(args: List[str]) -> int:
    config = _config(_arg(args, 0), preset='tiny')
    seed = _int_arg(_arg(args, 1), 'seed') or 0
    report = check_gradients(config, seed=seed)
    for line in report.lines():
        print(line)
    report.raise_on_failure()
    return 0


def cli_ablate(args: List[str]) -> int:
    config = _config(_arg(args, 0))
    data_dir = _arg(args, 1)
    out_dir = _arg(args, 2, RUNTIME_CONFIG['out_dir'])
    max_steps = _int_arg(_arg(args, 3), 'max_steps')
    if data_dir is None:
        train_set, eval_set = generate_train_eval(config.synthetic)
    else:
        classes = os.path.join(data_dir, 'classes.txt')
        train_set = read_dataset(os.path.join(data_dir, 'features.tadf'),
                                 os.path.join(data_dir, 'annotations.jsonl'), classes)
        eval_set = read_dataset(os.path.join(data_dir, 'eval_features.tadf'),
                                os.path.join(data_dir, 'eval_annotations.jsonl'), classes)
    table = run_ablation(config, train_set, eval_set, out_dir, max_steps)
    print(table.to_string(index=False))
    payload = {'header': artifact_header(config, 'ablation', max_steps=max_steps),
               'rows': json.loads(table.to_json(orient='records'))}
    atomic_write(os.path.join(out_dir, 'ablation.json'), json.dumps(payload, sort_keys=True, indent=2) + '\n')
    return 0


COMMANDS = {
    'synth': cli_synth,
    'train': cli_train,
    'infer': cli_infer,
    'eval': cli_eval,
    'gradcheck': cli_gradcheck,
    'ablate': cli_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Função principal; devolve o código de saída"""
    argv = sys.argv[1:] if argv is None else argv
    setup_logging()

    if not argv or argv[0].lower() not in COMMANDS:
        for line in USAGE:
            print(line)
        return 1

    command = argv[0].lower()
    try:
        return COMMANDS[command](argv[1:])
    except UsageError as e:
        print(e)
        for line in USAGE:
            print(line)
        return 1
    except DetectorError as e:
        logging.error(f"{command}: {e}")
        return e.exit_code
    except Exception as e:
        logging.error(f"Erro fatal em {command}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
