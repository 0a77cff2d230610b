import pytest

from tinydl.config import ConfigError, load_config, parse_config


def test_full_grammar():
    spec = parse_config("""
        # comment line
        input 28 28 1
        conv filters=8 kernel=5 stride=1 pad=same act=relu
        pool window=2 stride=2
        flatten
        dense units=256 act=relu   # trailing comment
        dropout p=0.25
        batchnorm
        act kind=prelu a=0.2
        dense units=10 act=softmax
        [train]
        optimizer=adam eta=0.0025 decay=2000
        batch=32 iters=7 lambda=0.001 seed=3 augment=flip_h,add_noise:0.05
    """)
    assert spec.input_shape == (28, 28, 1)
    assert [d.kind for d in spec.layers] == ["conv", "pool", "flatten", "dense", "dropout", "batchnorm", "act", "dense"]
    assert spec.layers[0].get("filters") == 8 and spec.layers[4].get("p") == 0.25
    t = spec.train
    assert (t.optimizer, t.eta, t.decay, t.batch, t.iters, t.lam, t.seed) == ("adam", 0.0025, 2000.0, 32, 7, 0.001, 3)
    assert t.augment == ("flip_h", "add_noise:0.05")


@pytest.mark.parametrize("text,line", [
    ("input 28 28 1\nconv filters=8\n", 2),
    ("input 28 28 1\nflatten\nlstm units=3\n", 3),
    ("input 28 28 1\ndense units=4 colour=red\n", 2),
    ("input 28 28 1\ndense units\n", 2),
    ("flatten\n", 1),
    ("input 28 x 1\n", 1),
    ("input 4 4 1\n[train]\noptimizer=lbfgs\n", 3),
    ("input 4 4 1\n[train]\nwarp=9\n", 3),
    ("input 4 4 1\n[train]\neta=fast\n", 3),
    ("input 4 4 1\nflatten\ninput 4 4 1\n", 3),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError, match=f"^line {line}:") as info:
        parse_config(text)
    assert info.value.line == line


def test_missing_input():
    with pytest.raises(ConfigError):
        parse_config("# nothing\n")


def test_shipped_configs_parse(configs):
    for name in ("shallow", "mlp", "cnn", "rgb5"):
        spec = load_config(configs / f"{name}.cfg")
        assert spec.layers


def test_with_train_overrides(configs):
    spec = load_config(configs / "shallow.cfg")
    other = spec.with_train(iters=0, seed=7)
    assert other.train.iters == 0 and other.train.seed == 7 and spec.train.iters == 1000
