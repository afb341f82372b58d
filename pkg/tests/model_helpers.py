import numpy as np

from pulse.model import PAD_ID, ModelConfig, init_model

CLS_ID, SEP_ID = 2, 3


def random_ids(rng, n, max_len, vocab, min_real=1):
    """Rows of cls, random tokens, sep, then padding."""
    ids = np.full((n, max_len), PAD_ID, dtype=np.int64)
    for i in range(n):
        k = int(rng.integers(min_real, max_len - 1)) if max_len > 2 else 0
        ids[i, 0] = CLS_ID
        ids[i, 1:1 + k] = rng.integers(4, vocab, size=k)
        ids[i, 1 + k] = SEP_ID
    return ids


def small_model(attention="bidirectional", seed=0, max_len=16, vocab=30, hidden=16, n_heads=2,
                n_layers=2, dtype=np.float32):
    pooling = "last_token" if attention == "causal" else "first_token"
    cfg = ModelConfig(vocab_size=vocab, n_layers=n_layers, hidden=hidden, n_heads=n_heads, ffn=2 * hidden,
                      max_len=max_len, attention=attention, pooling=pooling, seed=seed)
    return init_model(cfg, dtype=dtype)


def final_hidden(model, ids):
    _, cache = model._forward(ids)
    xhat, _ = cache["layers"][-1]["ln2"]
    last = model.config.n_layers - 1
    return xhat * model.params[f"layer{last}.ln2_g"] + model.params[f"layer{last}.ln2_b"]
