import copy

import numpy as np
import pyarrow.fs as fs
import pytest

from altlora import ContractError, DimensionError, MissingInputError, TokenIndexError
from altlora.model import (
    LoraAdapter,
    ModelConfig,
    TranscriberModel,
    adapted_ids,
    decoder_forward,
    describe,
    encode,
    load_checkpoint,
    lora_linear,
    merge_adapters,
    save_checkpoint,
    set_phase,
    trainable_parameters,
)
from altlora.numerics import Tensor, parameter
from altlora.synthdata import BOS, EOS

CONFIG = ModelConfig(hidden_dim=8, encoder_layers=1, decoder_layers=1, lora_rank=2, lora_alpha=2.0)


def random_adapter(rng, d_out, d_in, rank=2, alpha=2.0, p=0.0):
    return LoraAdapter(
        A=parameter(rng.standard_normal((rank, d_in))),
        B=parameter(rng.standard_normal((d_out, rank))),
        rank=rank,
        alpha=alpha,
        dropout=p,
    )


def randomize_adapters(model, rng):
    for adapter in model.adapters.values():
        adapter.B.values = 0.1 * rng.standard_normal(adapter.B.shape)


def test_model_config():
    """Test model.ModelConfig"""

    assert ModelConfig().vocab_size == 30

    with pytest.raises(ContractError):
        ModelConfig(hidden_dim=10, num_heads=3)
    with pytest.raises(ContractError):
        ModelConfig(vocab_size=3)
    with pytest.raises(ContractError):
        ModelConfig(max_audio_frames=0)

    assert ModelConfig.from_dict({"lora_alpha": "8"}).lora_alpha == 8.0
    with pytest.raises(Exception) as e:
        ModelConfig.from_dict({"layers": 2})
    assert "layers" in str(e.value)


def test_lora_linear():
    """Test model.lora_linear"""

    rng = np.random.default_rng(0)
    W = Tensor(rng.standard_normal((5, 4)))
    x = Tensor(rng.standard_normal((3, 4)))
    base = x.values @ W.values.T

    adapter = random_adapter(rng, 5, 4)
    adapter.B.values = np.zeros((5, 2))
    assert np.array_equal(lora_linear(adapter, W, x).values, base)
    assert np.array_equal(lora_linear(None, W, x).values, base)

    # doubling alpha doubles the delta
    adapter = random_adapter(rng, 5, 4, alpha=2.0)
    delta = lora_linear(adapter, W, x).values - base
    adapter.alpha = 4.0
    assert np.allclose(lora_linear(adapter, W, x).values - base, 2 * delta, atol=1e-12)

    # merged weights agree with the adapter path
    for _ in range(50):
        adapter = random_adapter(rng, 5, 4)
        x = Tensor(rng.standard_normal((3, 4)))
        merged = Tensor(W.values + adapter.delta())
        assert np.max(np.abs(lora_linear(adapter, W, x).values - lora_linear(None, merged, x).values)) <= 1e-10

    # dropout only in train mode, only on the adapter branch
    adapter = random_adapter(rng, 5, 4, p=0.5)
    eval_out = lora_linear(adapter, W, x).values
    assert np.array_equal(eval_out, lora_linear(adapter, W, x).values)
    train_out = lora_linear(adapter, W, x, True, rng=np.random.default_rng(1)).values
    assert not np.allclose(train_out, eval_out)
    adapter.B.values = np.zeros((5, 2))
    train_out = lora_linear(adapter, W, x, True, rng=np.random.default_rng(1)).values
    assert np.array_equal(train_out, x.values @ W.values.T)

    with pytest.raises(DimensionError):
        lora_linear(None, W, Tensor(np.ones((3, 5))))


def test_encode():
    """Test model.encode"""

    model = TranscriberModel(CONFIG, seed=1)
    X = np.random.default_rng(2).standard_normal((12, CONFIG.feature_dim))

    encoded = encode(model, X)
    assert encoded.E.shape == (12, CONFIG.hidden_dim)
    assert encoded.mask.tolist() == [True] * 12
    assert np.array_equal(encode(model, X).E.values, encoded.E.values)

    with pytest.raises(ContractError) as e:
        encode(model, np.zeros((CONFIG.max_audio_frames + 1, CONFIG.feature_dim)))
    assert "longform_decode" in str(e.value)

    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ContractError):
        encode(model, bad)

    # padded frames don't change the valid frames' encodings
    padded = np.zeros((1, 15, CONFIG.feature_dim))
    padded[0, :12] = X
    mask = np.zeros((1, 15), dtype=bool)
    mask[0, :12] = True
    batched = encode(model, padded, mask=mask)
    assert np.allclose(batched.E.values[0, :12], encoded.E.values, atol=1e-12)


def test_decoder_forward():
    """Test model.decoder_forward"""

    model = TranscriberModel(CONFIG, seed=3)
    rng = np.random.default_rng(4)
    encoded = encode(model, rng.standard_normal((9, CONFIG.feature_dim)))

    assert decoder_forward(model, encoded, [BOS]).shape == (1, CONFIG.vocab_size)

    with pytest.raises(ContractError):
        decoder_forward(model, encoded, [5, 6])
    with pytest.raises(ContractError):
        decoder_forward(model, encoded, [BOS] * (CONFIG.max_token_len + 1))
    with pytest.raises(TokenIndexError):
        decoder_forward(model, encoded, [BOS, CONFIG.vocab_size])

    # causality: perturbing later tokens leaves earlier logits unchanged
    for _ in range(20):
        L = int(rng.integers(2, 10))
        y = [BOS] + rng.integers(3, CONFIG.vocab_size, L - 1).tolist()
        t = int(rng.integers(0, L - 1))
        perturbed = list(y)
        perturbed[t + 1 :] = rng.integers(3, CONFIG.vocab_size, L - t - 1).tolist()

        logits = decoder_forward(model, encoded, y).values
        other = decoder_forward(model, encoded, perturbed).values
        assert np.array_equal(logits[: t + 1], other[: t + 1])


def test_zero_init_identity():
    """Test a freshly adapted model against its base"""

    base = TranscriberModel(CONFIG, seed=5)
    adapted = copy.deepcopy(base)
    adapted.attach_lora(seed=6)

    rng = np.random.default_rng(7)
    y = [BOS, 5, 6, 7, EOS]
    for _ in range(5):
        X = rng.standard_normal((10, CONFIG.feature_dim))
        E_base, E_adapted = encode(base, X), encode(adapted, X)
        assert np.array_equal(E_base.E.values, E_adapted.E.values)
        assert np.array_equal(
            decoder_forward(base, E_base, y).values,
            decoder_forward(adapted, E_adapted, y).values,
        )


def test_merge_adapters():
    """Test model.merge_adapters"""

    model = TranscriberModel(CONFIG, seed=8)
    model.attach_lora(seed=9)
    rng = np.random.default_rng(10)
    randomize_adapters(model, rng)

    merged = merge_adapters(model)
    assert merged.adapters == {}
    assert merged.seeds == model.seeds

    y = [BOS, 4, 9, 3]
    for _ in range(50):
        X = rng.standard_normal((int(rng.integers(1, 20)), CONFIG.feature_dim))
        runtime = decoder_forward(model, encode(model, X), y).values
        folded = decoder_forward(merged, encode(merged, X), y).values
        assert np.max(np.abs(runtime - folded)) <= 1e-10


def test_trainable_parameters():
    """Test model.trainable_parameters"""

    model = TranscriberModel(CONFIG, seed=11)
    assert trainable_parameters(model, "finetune") == []
    assert len(trainable_parameters(model, "pretrain")) == len(model.params)

    model.attach_lora(seed=12)
    finetune = trainable_parameters(model, "finetune")
    H, r = CONFIG.hidden_dim, CONFIG.lora_rank
    assert len(adapted_ids(CONFIG)) == 2 * CONFIG.encoder_layers + 4 * CONFIG.decoder_layers
    assert sum(p.size for p in finetune) == len(adapted_ids(CONFIG)) * r * (H + H)

    pretrain_ids = {id(p) for p in trainable_parameters(model, "pretrain")}
    assert not pretrain_ids & {id(p) for p in finetune}

    set_phase(model, "finetune")
    assert all(not p.requires_grad for p in model.params.values())
    assert all(p.requires_grad for p in finetune)

    with pytest.raises(ContractError):
        trainable_parameters(model, "evaluate")


def test_checkpoint(tmp_path):
    """Test model.save_checkpoint and model.load_checkpoint"""

    model = TranscriberModel(CONFIG, seed=13)
    model.attach_lora(seed=14)
    randomize_adapters(model, np.random.default_rng(15))

    file_path = save_checkpoint(model, str(tmp_path / "model.arrow"))
    loaded = load_checkpoint(file_path)

    assert loaded.config == model.config
    assert loaded.seeds == [13, 14]
    assert loaded.digest() == model.digest()
    assert loaded.base_digest() == model.base_digest()
    for name, p in model.params.items():
        assert np.array_equal(loaded.params[name].values, p.values)
    for adapter_id, adapter in model.adapters.items():
        assert np.array_equal(loaded.adapters[adapter_id].B.values, adapter.B.values)

    # same content, same bytes
    again = save_checkpoint(loaded, str(tmp_path / "again.arrow"))
    local = fs.LocalFileSystem()
    with local.open_input_stream(file_path) as a, local.open_input_stream(again) as b:
        assert a.read() == b.read()

    with pytest.raises(MissingInputError):
        load_checkpoint(str(tmp_path / "missing.arrow"))

    assert "base_digest" in describe(loaded)


def test_train_mode_default_dropout():
    """Test model.encode and model.decoder_forward in train mode without an rng"""

    X = np.random.default_rng(6).standard_normal((10, CONFIG.feature_dim))

    def adapted():
        model = TranscriberModel(CONFIG, seed=1)
        model.attach_lora(seed=2)
        randomize_adapters(model, np.random.default_rng(3))
        return model

    model = adapted()
    assert model.config.lora_dropout > 0.0
    encoded = encode(model, X, True)
    assert encoded.E.shape == (10, CONFIG.hidden_dim)
    assert np.all(np.isfinite(encoded.E.values))
    assert decoder_forward(model, encoded, [BOS, 5, 6], True).shape == (3, CONFIG.vocab_size)

    # the default stream is seeded by the seed lineage
    assert np.array_equal(encode(adapted(), X, True).E.values, encoded.E.values)

    # an explicit rng overrides it
    first = encode(adapted(), X, True, np.random.default_rng(7)).E.values
    second = encode(adapted(), X, True, np.random.default_rng(7)).E.values
    assert np.array_equal(first, second)
    assert not np.array_equal(first, encoded.E.values)
