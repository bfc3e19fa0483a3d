"""
Exceções do detector temporal de ações
"""

from typing import Optional


class DetectorError(Exception):
    """Erro base do projeto"""

    exit_code = 1


class InvalidArgumentError(DetectorError, ValueError):
    """Argumento fora do domínio da operação (formas, comprimentos, parâmetros)"""


class StateError(DetectorError, RuntimeError):
    """Operação chamada no estado errado (backward sem forward, sem gradientes, sem checkpoint)"""


class ConsistencyError(DetectorError):
    """Invariante interno violado"""


class ParseError(DetectorError, ValueError):
    """Arquivo de entrada malformado"""

    exit_code = 2

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ''
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ': '
        super().__init__(f"{where}{message}")


class ConfigError(DetectorError, ValueError):
    """Configuração inválida ou chave desconhecida"""

    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        prefix = f"linha {line}: " if line is not None else ''
        super().__init__(f"{prefix}{message}")


class DivergenceError(DetectorError, RuntimeError):
    """Perda ou tensor não finito durante o treino"""

    exit_code = 3

    def __init__(self, message: str, tensor_name: Optional[str] = None):
        self.tensor_name = tensor_name
        super().__init__(message)


class VersionMismatchError(DetectorError):
    """Versão de checkpoint incompatível"""

    exit_code = 4

    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"versão de checkpoint {found} incompatível (esperada {expected})")


class GradientCheckError(DetectorError):
    """Gradiente analítico diverge das diferenças finitas"""

    exit_code = 5

    def __init__(self, message: str, worst_parameter: Optional[str] = None):
        self.worst_parameter = worst_parameter
        super().__init__(message)
