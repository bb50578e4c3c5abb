from pathlib import Path
from typing import Dict

from errors import ConfigError

# 随代码发布的参数文件目录
CONFIG_DIR = Path(__file__).resolve().parent / "config"

# 着陆问题参数文件（示例数值）
LANDING_PARAMS_PATH = CONFIG_DIR / "landing.conf"


def load_key_values(path) -> Dict[str, str]:
    """读取平铺的 key = value 文件，# 之后为注释"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")

    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        values[key] = value
    return values
