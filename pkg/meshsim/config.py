import os
from typing import Dict, List, MutableMapping, Optional, Tuple

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30

HW_CPU = "cpu"
HW_GPU = "gpu"
HW_CLASSES = (HW_CPU, HW_GPU)

POLICY_MESH = "mesh"
POLICY_EXCLUSIVE = "exclusive"
POLICY_EXCLUSIVE_CPU = "exclusive_cpu"
POLICIES = (POLICY_MESH, POLICY_EXCLUSIVE, POLICY_EXCLUSIVE_CPU)

PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))


ENV_PREFIX = "MESHSIM_"
ENV_FILE = os.path.join(PROJECT_ROOT, ".env")


def _env_key(raw: str) -> str:
    key = raw.strip()
    if key.startswith("export "):
        key = key[len("export ") :].strip()
    key = key.upper()
    if not key.startswith(ENV_PREFIX):
        key = ENV_PREFIX + key
    return key


def load_local_env(path: str = ENV_FILE, environ: Optional[MutableMapping[str, str]] = None) -> List[str]:
    """Fill unset MESHSIM_* variables from a dotenv file.

    Keys may be written bare (``SEED=7``) or prefixed (``MESHSIM_SEED=7``);
    both land on ``MESHSIM_SEED``. Variables already set are left alone.
    Returns the keys that were set.
    """
    env = os.environ if environ is None else environ
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError:
        return []
    loaded: List[str] = []
    for raw_line in lines:
        line = raw_line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        raw_key, value = line.split("=", 1)
        key = _env_key(raw_key)
        if key == ENV_PREFIX or key in env:
            continue
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in ("'", '"'):
            value = value[1:-1]
        env[key] = value
        loaded.append(key)
    return loaded


load_local_env()

DEFAULT_SEED = int(os.environ.get("MESHSIM_SEED", "42"))
KEEP_ALIVE_SECONDS = float(os.environ.get("MESHSIM_KEEP_ALIVE", "1.0"))
WATERMARK_PERCENT = float(os.environ.get("MESHSIM_WATERMARK", "20"))
OVERESTIMATE_FACTOR = float(os.environ.get("MESHSIM_OVERESTIMATE", "1.10"))
DEFAULT_OUT_DIR = os.environ.get("MESHSIM_OUT_DIR", os.path.join(PROJECT_ROOT, "out")).strip()
LOG_LEVEL = os.environ.get("MESHSIM_LOG_LEVEL", "INFO").strip().upper()

TTFT_BASE_SECONDS = 2.0
TTFT_TOKENS_PER_SECOND = 512.0
TPOT_SECONDS = 0.25

TRACE_WINDOW_SECONDS = 30 * 60.0
OUTPUT_LEN_WINDOW = 1000

CPU_NODE_CAPACITY = 256 * GiB
GPU_NODE_CAPACITY = 80 * GiB
DEFAULT_CPU_NODES = 4
DEFAULT_GPU_NODES = 4

# Scaling rates from two measured points: 32->16 GiB shrink in 0.3 s,
# 32->64 GiB grow in 1.9 s. Only the copied bytes cost time.
SCALE_DOWN_RATE = 16 * GiB / 0.3
SCALE_UP_RATE = 32 * GiB / 1.9
SCALE_FLOOR_SECONDS = 0.01
UNLOAD_SECONDS = 0.01
LOAD_BANDWIDTH = 10 * GiB

MAX_BATCH = 256

MODEL_PRESETS: Dict[str, Dict[str, object]] = {
    "llama-3b": {
        "size_class": "3b",
        "param_bytes": 6 * GiB,
        "kv_bytes_per_token": 112 * KiB,
        "max_seq_len": 4096,
    },
    "llama-7b": {
        "size_class": "7b",
        "param_bytes": 14 * GiB,
        "kv_bytes_per_token": 512 * KiB,
        "max_seq_len": 4096,
    },
    "llama-13b": {
        "size_class": "13b",
        "param_bytes": 26 * GiB,
        "kv_bytes_per_token": 800 * KiB,
        "max_seq_len": 4096,
    },
}

MODEL_ALIASES = {
    "llama3.2-3b": "llama-3b",
    "llama-3.2-3b": "llama-3b",
    "3b": "llama-3b",
    "llama2-7b": "llama-7b",
    "llama-2-7b": "llama-7b",
    "7b": "llama-7b",
    "llama2-13b": "llama-13b",
    "llama-2-13b": "llama-13b",
    "13b": "llama-13b",
}

# Scale-out thresholds of the exclusive baselines, per (size class, hardware).
BASELINE_THRESHOLDS: Dict[Tuple[str, str], int] = {
    ("3b", HW_CPU): 59,
    ("7b", HW_CPU): 15,
    ("13b", HW_CPU): 6,
    ("3b", HW_GPU): 160,
    ("7b", HW_GPU): 32,
    ("13b", HW_GPU): 16,
}

# Affine decode cost a*batch*avg_len + b*batch + c and linear prefill cost
# p*len + q, per (preset, hardware). The CPU 7B row keeps the 16-batch decode
# at 1.69x the single-request decode at 1k context; the CPU 13B row keeps the
# 32-batch decode at 2k context at 2.0x the one at 512.
_CPU_7B_BASE = 0.1
_CPU_7B_A = 4.0e-6
_CPU_7B_PER_REQUEST_AT_1K = _CPU_7B_BASE * 0.69 / 14.31
_CPU_13B_BASE = 0.2
_CPU_13B_B = 0.001

DECODE_COEFFS: Dict[Tuple[str, str], Tuple[float, float, float]] = {
    ("llama-3b", HW_CPU): (1.0e-6, 3.0e-4, 0.05),
    ("llama-7b", HW_CPU): (_CPU_7B_A, _CPU_7B_PER_REQUEST_AT_1K - 1024 * _CPU_7B_A, _CPU_7B_BASE),
    ("llama-13b", HW_CPU): ((32 * _CPU_13B_B + _CPU_13B_BASE) / 32768.0, _CPU_13B_B, _CPU_13B_BASE),
    ("llama-3b", HW_GPU): (0.5e-8, 5.0e-5, 0.006),
    ("llama-7b", HW_GPU): (2.0e-8, 1.0e-4, 0.012),
    ("llama-13b", HW_GPU): (3.0e-8, 1.5e-4, 0.022),
}

PREFILL_COEFFS: Dict[Tuple[str, str], Tuple[float, float]] = {
    ("llama-3b", HW_CPU): (4.0e-4, 0.03),
    ("llama-7b", HW_CPU): (1.0e-3, 0.05),
    ("llama-13b", HW_CPU): (1.8e-3, 0.1),
    ("llama-3b", HW_GPU): (5.0e-5, 0.01),
    ("llama-7b", HW_GPU): (1.0e-4, 0.02),
    ("llama-13b", HW_GPU): (1.8e-4, 0.03),
}


def normalize_model_id(raw: str) -> str:
    s = str(raw or "").strip().lower()
    s = s.replace(" ", "-").replace("_", "-")
    if s in MODEL_ALIASES:
        return MODEL_ALIASES[s]
    return s


def preset_of(model_id: str) -> str:
    """Model replicas are named `<preset>/<function_id>`."""
    return normalize_model_id(str(model_id).split("/", 1)[0])


def get_model_preset(name: str) -> Dict[str, object]:
    key = normalize_model_id(name)
    if key not in MODEL_PRESETS:
        raise ValueError(f"unknown model preset '{name}'")
    return MODEL_PRESETS[key]


def baseline_threshold(size_class: str, hw: str) -> int:
    return BASELINE_THRESHOLDS.get((size_class, hw), 1)
