# config.py
"""
Arquivo de configuração do detector temporal de ações (valores padrão)
"""

import os
from dotenv import load_dotenv

# Carrega variáveis de ambiente do arquivo .env
load_dotenv()

# Rede: base 1d, main stream e ramos de refinamento
NETWORK_CONFIG = {
    'input_dim': 16,
    'window_length': 64,
    'base_channels': 32,
    'num_classes': 5,
    'rho': 2 / 3,
    'head_kernel': 3,
    'base_conv1_stride': 1,
    'base_conv2_stride': 2,
    'base_pool_kernel': 2,
    'base_pool_stride': 2,
    'deconv_kernel': 4,
    'deconv_stride': 2,
    'deconv_padding': 1,
}

# Âncoras (comprimentos das camadas em células temporais)
ANCHOR_CONFIG = {
    'layer_lengths': [8, 4, 2],
    'ratios': [0.5, 0.75, 1.0, 1.5, 2.0],
    'alpha1': 0.1,
    'alpha2': 0.1,
    'match_threshold': 0.5,
}

# Treino (escala de mesa; full_scale() usa 30 épocas, lr 1e-4, lote 48)
TRAIN_CONFIG = {
    'epochs': 10,
    'learning_rate': 1e-3,
    'batch_size': 8,
    'seed': 0,
    'ablation_mode': 'full',
    'negative_ratio': 1.0,
    'hard_overlap': 0.5,
    'zero_positive_negatives': 8,
    'regression_target': 'decoded',
    'beta1': 0.9,
    'beta2': 0.999,
    'epsilon': 1e-8,
    'checkpoint_every': 0,
}

# Pesos da função objetivo
LOSS_CONFIG = {
    'alpha': 1.0,
    'beta': 10.0,
    'gamma': 10.0,
    'omega': 2 / 3,
}

# Dados sintéticos
SYNTH_CONFIG = {
    'num_videos': 200,
    'num_eval_videos': 50,
    'actions_min': 1,
    'actions_max': 3,
    'width_min': 0.08,
    'width_max': 0.45,
    'noise_level': 0.3,
    'clip_seconds': 0.5,
    'max_retries': 20,
    'seed': 7,
}

# Inferência e avaliação
INFERENCE_CONFIG = {
    'nms_threshold': 0.2,
    'min_score': 0.0,
    'score_with_overlap': False,
    'max_detections_per_video': 200,
    'eval_thresholds': [0.3, 0.4, 0.5, 0.6, 0.7],
}

# Sobrescritas por ambiente (somente diretório de saída e número de threads)
RUNTIME_CONFIG = {
    'out_dir': os.getenv('DSSAD_OUT_DIR', 'runs'),
    'threads': int(os.getenv('DSSAD_THREADS', 1)),
}

# Configurações de logging
LOGGING_CONFIG = {
    'level': 'INFO',
    'format': '%(asctime)s - %(levelname)s - %(message)s',
    'log_file': 'decouple_ssad.log',
}
