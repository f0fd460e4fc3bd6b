import os

from meshsim.config import ENV_PREFIX, load_local_env


def _env_file(tmp_path, text):
    path = tmp_path / ".env"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_bare_and_prefixed_keys_land_in_the_meshsim_namespace(tmp_path):
    path = _env_file(
        tmp_path,
        "# local overrides\n"
        "SEED=7\n"
        "export MESHSIM_WATERMARK=10\n"
        "keep_alive = '2.5'\n"
        "\n"
        "not a setting\n",
    )
    env = {}
    loaded = load_local_env(path, env)
    assert loaded == ["MESHSIM_SEED", "MESHSIM_WATERMARK", "MESHSIM_KEEP_ALIVE"]
    assert env == {"MESHSIM_SEED": "7", "MESHSIM_WATERMARK": "10", "MESHSIM_KEEP_ALIVE": "2.5"}
    assert all(key.startswith(ENV_PREFIX) for key in env)


def test_existing_variables_win(tmp_path):
    path = _env_file(tmp_path, 'SEED=7\nOUT_DIR="/tmp/mesh out"\n')
    env = {"MESHSIM_SEED": "1"}
    assert load_local_env(path, env) == ["MESHSIM_OUT_DIR"]
    assert env == {"MESHSIM_SEED": "1", "MESHSIM_OUT_DIR": "/tmp/mesh out"}


def test_empty_keys_are_skipped(tmp_path):
    env = {}
    assert load_local_env(_env_file(tmp_path, "=1\nMESHSIM_=2\n"), env) == []
    assert env == {}


def test_missing_file_sets_nothing(tmp_path, monkeypatch):
    monkeypatch.delenv("MESHSIM_SEED", raising=False)
    assert load_local_env(str(tmp_path / "absent.env")) == []
    assert "MESHSIM_SEED" not in os.environ
