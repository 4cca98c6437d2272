"""Caption generation from frozen encoder tokens.

Patch tokens T are projected and normalised, ``Z = LN(T W_p)``, then pooled
by K learned queries, ``A = softmax(Q Z^T / sqrt(D_l))`` and ``P = A Z``.
The pooled tokens are a visual prefix for any sequence decoder following
the :class:`SeqDecoder` protocol; a small transformer decoder is bundled.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from .core import count_parameters, freeze, seed_everything
from .exceptions import ConfigError, DataError, DomainError, ShapeError
from .metrics import caption_report
from .training import encoder_snapshot, minibatches, resize_images, resolve_encoder
from .validation import check_images, check_is_fitted
from .vit import VisionTransformer

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "split", "loss", "bleu", "bleu_1", "bleu_4", "rouge_l")


# --------------------------------------------------------------------------
# tokenizer


class WhitespaceTokenizer:
    """Lower-cased whitespace tokenizer with pad/bos/eos/unk specials."""

    PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
    SPECIALS = (PAD, BOS, EOS, UNK)

    def __init__(self, vocab=None):
        self.itos = list(self.SPECIALS) + sorted(set(vocab or ()) - set(self.SPECIALS))
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts):
        words = Counter(w for t in texts for w in cls.split(t))
        return cls(words)

    @staticmethod
    def split(text: str) -> list[str]:
        return str(text).lower().split()

    pad_id = property(lambda self: 0)
    bos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    unk_id = property(lambda self: 3)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        """``[bos] words... [eos]``."""
        ids = [self.stoi.get(w, self.unk_id) for w in self.split(text)]
        return [self.bos_id, *ids, self.eos_id]

    def batch_encode(self, texts) -> torch.Tensor:
        seqs = [self.encode(t) for t in texts]
        out = torch.full((len(seqs), max(map(len, seqs))), self.pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = torch.tensor(s)
        return out

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            words.append(self.itos[i])
        return " ".join(words)

    def to_dict(self) -> dict:
        return {"itos": self.itos}

    @classmethod
    def from_dict(cls, d):
        return cls(d["itos"][len(cls.SPECIALS):])


# --------------------------------------------------------------------------
# bridge


def project_tokens(tokens: torch.Tensor, weight: torch.Tensor, ln_weight=None, ln_bias=None,
                   eps: float = 1e-5) -> torch.Tensor:
    """``LN(T W_p)`` with ``T`` [B, N, D_v] and ``W_p`` [D_v, D_l]."""
    if tokens.shape[-1] != weight.shape[0]:
        raise ShapeError(f"token dim {tokens.shape[-1]} != projection input dim {weight.shape[0]}")
    z = tokens @ weight
    return F.layer_norm(z, (weight.shape[1],), ln_weight, ln_bias, eps)


class TokenProjector(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_dim, out_dim))
        nn.init.trunc_normal_(self.weight, std=in_dim ** -0.5)
        self.norm = nn.LayerNorm(out_dim)

    def forward(self, tokens):
        return project_tokens(tokens, self.weight, self.norm.weight, self.norm.bias, self.norm.eps)


def merge_attention(z: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
    """``softmax(Q Z^T / sqrt(D_l))`` over the token axis: [B, K, N]."""
    if z.shape[-1] != queries.shape[-1]:
        raise ShapeError(f"token dim {z.shape[-1]} != query dim {queries.shape[-1]}")
    return torch.softmax(queries @ z.transpose(-2, -1) / math.sqrt(z.shape[-1]), dim=-1)


def patch_merge(z: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
    """Pool [B, N, D_l] tokens into [B, K, D_l] with ``P = A Z``."""
    return merge_attention(z, queries) @ z


class PatchMerger(nn.Module):
    """K learned queries attending directly over the tokens.

    ``project_kv=True`` adds key/value projections; off by default, in
    which case the pooling is exactly :func:`patch_merge`.
    """

    def __init__(self, dim: int, n_queries: int = 64, project_kv: bool = False):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(n_queries, dim))
        nn.init.trunc_normal_(self.queries, std=0.02)
        self.project_kv = project_kv
        if project_kv:
            self.k = nn.Linear(dim, dim)
            self.v = nn.Linear(dim, dim)

    def forward(self, z):
        if not self.project_kv:
            return patch_merge(z, self.queries)
        return merge_attention(self.k(z), self.queries) @ self.v(z)


# --------------------------------------------------------------------------
# decoders


@runtime_checkable
class SeqDecoder(Protocol):
    """What the caption bridge needs from a language model.

    ``forward(prefix, ids)`` returns teacher-forced next-token
    log-probabilities [B, T, V] for inputs ``ids`` [B, T];
    ``step_log_probs(prefix, ids)`` returns those for the token after the
    last position, [B, V].
    """

    vocab_size: int

    def __call__(self, prefix: torch.Tensor, ids: torch.Tensor) -> torch.Tensor: ...

    def step_log_probs(self, prefix: torch.Tensor, ids: torch.Tensor) -> torch.Tensor: ...


class ToyDecoder(nn.Module):
    """Causal transformer decoder with cross-attention to the visual prefix."""

    def __init__(self, vocab_size: int, dim: int, n_layers: int = 2, n_heads: int = 4,
                 max_len: int = 128):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.zeros(1, max_len, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        layer = nn.TransformerDecoderLayer(
            dim, n_heads, dim_feedforward=4 * dim, dropout=0.0, batch_first=True, norm_first=True
        )
        self.layers = nn.TransformerDecoder(layer, n_layers)
        self.norm = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, vocab_size)

    def forward(self, prefix, ids):
        if prefix.shape[-1] != self.dim:
            raise ShapeError(f"prefix dim {prefix.shape[-1]} != decoder dim {self.dim}")
        T = ids.shape[1]
        if T > self.max_len:
            raise DomainError(f"sequence length {T} exceeds decoder max_len {self.max_len}")
        x = self.embed(ids) * math.sqrt(self.dim) + self.pos[:, :T]
        causal = torch.triu(torch.full((T, T), float("-inf")), diagonal=1)
        h = self.layers(x, prefix, tgt_mask=causal)
        return F.log_softmax(self.out(self.norm(h)), dim=-1)

    def step_log_probs(self, prefix, ids):
        return self(prefix, ids)[:, -1]


def caption_nll(prefix, targets: torch.Tensor, decoder, pad_id: int = 0):
    """Summed NLL and number of scored positions.

    ``targets`` hold ``bos ... eos`` plus padding; position t is predicted
    from positions < t, and padding is excluded.
    """
    if targets.ndim != 2 or targets.shape[1] < 2:
        raise DataError("targets need at least a start and one further token")
    labels = targets[:, 1:]
    keep = labels != pad_id
    n = int(keep.sum())
    if n == 0:
        raise DataError("no non-padding target tokens")
    logp = decoder(prefix, targets[:, :-1])
    picked = logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -torch.where(keep, picked, torch.zeros_like(picked)).sum(), n


def caption_loss(prefix, targets, decoder, pad_id: int = 0):
    """Mean negative log-likelihood per non-padding target token."""
    total, n = caption_nll(prefix, targets, decoder, pad_id)
    return total / n


@torch.no_grad()
def beam_search(prefix, decoder, beams: int = 5, max_tokens: int = 64, bos_id: int = 1,
                eos_id: int = 2):
    """Length-unnormalised beam search for one prefix [K, D].

    Finished hypotheses stay in the pool and compete with extensions; the
    search stops when the top ``beams`` are all finished or ``max_tokens``
    tokens were generated. Returns (tokens without bos, log-probability).
    With ``beams=1`` this is greedy decoding (ties resolve to the lowest id).
    """
    if beams < 1:
        raise DomainError(f"beams must be >= 1, got {beams}")
    if max_tokens < 1:
        raise DomainError("max_tokens must be >= 1")
    pool = [((bos_id,), 0.0, False)]
    for _ in range(max_tokens):
        alive = [h for h in pool if not h[2]]
        if not alive:
            break
        ids = torch.tensor([h[0] for h in alive])
        logp = decoder.step_log_probs(prefix.unsqueeze(0).expand(len(alive), *prefix.shape), ids)
        logp = logp.double()
        V = logp.shape[-1]
        scores = torch.tensor([h[1] for h in alive], dtype=torch.float64)[:, None] + logp
        order = torch.sort(scores.reshape(-1), descending=True, stable=True).indices[:beams]
        expanded = []
        for flat in order.tolist():
            b, tok = divmod(flat, V)
            expanded.append((alive[b][0] + (tok,), scores[b, tok].item(), tok == eos_id))
        finished = [h for h in pool if h[2]]
        # stable sort keeps finished hypotheses ahead of equal-score extensions
        pool = sorted(finished + expanded, key=lambda h: -h[1])[:beams]
    best = max(pool, key=lambda h: h[1])
    return list(best[0][1:]), best[1]


def generate(prefix, decoder, beams: int = 5, max_tokens: int = 64, bos_id: int = 1,
             eos_id: int = 2):
    """Beam search for each prefix in a batch [B, K, D]; list of token lists."""
    if beams < 1:
        raise DomainError(f"beams must be >= 1, got {beams}")
    return [beam_search(p, decoder, beams, max_tokens, bos_id, eos_id)[0] for p in prefix]


# --------------------------------------------------------------------------
# model and estimator


class CaptionBridge(nn.Module):
    """Frozen encoder -> projector -> patch merger -> sequence decoder."""

    def __init__(self, encoder: VisionTransformer, decoder: nn.Module, dim: int,
                 n_queries: int = 64, project_kv: bool = False):
        super().__init__()
        self.encoder = freeze(encoder)
        self.projector = TokenProjector(encoder.embed_dim, dim)
        self.merger = PatchMerger(dim, n_queries, project_kv)
        self.decoder = decoder

    def train(self, mode=True):
        super().train(mode)
        self.encoder.eval()
        return self

    @torch.no_grad()
    def encode(self, images):
        return self.encoder(images).patch_tokens

    def prefix(self, tokens):
        return self.merger(self.projector(tokens))


def accumulation_step(model: CaptionBridge, optimizer, tokens, targets, micro_batch: int,
                      pad_id: int = 0) -> float:
    """One optimizer step over ``targets`` split into micro-batches.

    Each micro-batch contributes its summed NLL divided by the token count
    of the whole batch, so the accumulated gradient is the gradient of the
    full-batch mean loss whatever the micro-batch size.
    """
    if micro_batch < 1:
        raise DomainError("micro_batch must be >= 1")
    n_total = int((targets[:, 1:] != pad_id).sum())
    if n_total == 0:
        raise DataError("no non-padding target tokens")
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for start in range(0, targets.shape[0], micro_batch):
        sl = slice(start, start + micro_batch)
        tgt = targets[sl]
        width = int((tgt != pad_id).sum(1).max())
        tgt = tgt[:, :width]
        if int((tgt[:, 1:] != pad_id).sum()) == 0:
            continue
        nll, _ = caption_nll(model.prefix(tokens[sl]), tgt, model.decoder, pad_id)
        (nll / n_total).backward()
        total += nll.item()
    optimizer.step()
    return total / n_total


class Captioner(BaseEstimator):
    """Image captioner on a frozen ViT encoder.

    Parameters
    ----------
    encoder : str, path or VisionTransformer, default="small"
    dim : int, default=None
        Decoder / prefix width D_l; defaults to the encoder width.
    n_queries : int, default=64
        Number of pooled prefix tokens K.
    decoder_layers, decoder_heads : int
        Size of the bundled decoder.
    decoder : nn.Module, default=None
        A custom :class:`SeqDecoder` (deep-copied); its ``vocab_size`` must
        match the tokenizer built from the training captions.
    epochs, lr, weight_decay
        AdamW settings.
    batch_size : int, default=64
        Effective batch size per optimizer step.
    micro_batch_size : int, default=8
        Gradient-accumulation chunk.
    beams, max_tokens : int
        Generation settings.
    image_size : int, default=224
    random_state : int, default=0

    Attributes
    ----------
    model_ : CaptionBridge
    tokenizer_ : WhitespaceTokenizer
    history_ : list of dict
        Rows ``epoch, split, loss, bleu, bleu_1, bleu_4, rouge_l``; BLEU and
        ROUGE-L are computed on ``eval_set`` only.
    """

    def __init__(self, encoder="small", dim=None, n_queries=64, decoder_layers=2,
                 decoder_heads=4, decoder=None, project_kv=False, epochs=20, lr=5e-5,
                 weight_decay=0.01, batch_size=64, micro_batch_size=8, beams=5, max_tokens=64,
                 image_size=224, random_state=0):
        self.encoder = encoder
        self.dim = dim
        self.n_queries = n_queries
        self.decoder_layers = decoder_layers
        self.decoder_heads = decoder_heads
        self.decoder = decoder
        self.project_kv = project_kv
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.micro_batch_size = micro_batch_size
        self.beams = beams
        self.max_tokens = max_tokens
        self.image_size = image_size
        self.random_state = random_state

    def _prepare(self, X):
        return resize_images(check_images(X), self.image_size)

    def _build(self, vocab_size):
        import copy

        encoder = resolve_encoder(self.encoder, self.image_size)
        dim = self.dim or encoder.embed_dim
        if self.decoder is not None:
            decoder = copy.deepcopy(self.decoder)
            if getattr(decoder, "vocab_size", None) != vocab_size:
                raise ConfigError(
                    f"decoder vocab {getattr(decoder, 'vocab_size', None)} != tokenizer vocab {vocab_size}"
                )
        else:
            decoder = ToyDecoder(vocab_size, dim, self.decoder_layers, self.decoder_heads,
                                 max_len=max(self.max_tokens + 1, 128))
        return CaptionBridge(encoder, decoder, dim, self.n_queries, self.project_kv)

    @torch.no_grad()
    def _tokens(self, model, X, batch_size=64):
        return torch.cat([model.encode(X[i : i + batch_size]) for i in range(0, X.shape[0], batch_size)])

    def fit(self, X, captions, eval_set=None):
        seed_everything(self.random_state)
        X = self._prepare(X)
        captions = [str(c) for c in np.asarray(captions, dtype=object).reshape(-1)]
        if len(captions) != X.shape[0]:
            raise DataError(f"{X.shape[0]} images but {len(captions)} captions")
        if not captions:
            raise DataError("empty training split")
        tok = WhitespaceTokenizer.from_texts(captions)
        model = self._build(tok.vocab_size)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.AdamW(params, lr=self.lr, weight_decay=self.weight_decay)

        model.eval()
        tokens = self._tokens(model, X)
        targets = tok.batch_encode(captions)
        if eval_set is not None:
            X_val = self._prepare(eval_set[0])
            val_caps = [str(c) for c in np.asarray(eval_set[1], dtype=object).reshape(-1)]
            val_tokens = self._tokens(model, X_val)

        self.model_, self.tokenizer_ = model, tok
        history = []
        for epoch in range(self.epochs):
            model.train()
            losses, weights = [], []
            for idx in minibatches(X.shape[0], self.batch_size):
                loss = accumulation_step(model, opt, tokens[idx], targets[idx],
                                         self.micro_batch_size, tok.pad_id)
                losses.append(loss)
                weights.append(int((targets[idx, 1:] != tok.pad_id).sum()))
            model.eval()
            history.append({"epoch": epoch, "split": "train",
                            "loss": float(np.average(losses, weights=weights))})
            if eval_set is not None:
                hyps = self._generate(val_tokens)
                rep = caption_report([tok.split(h) for h in hyps], [tok.split(c) for c in val_caps])
                history.append({"epoch": epoch, "split": "val",
                                "loss": self._mean_loss(val_tokens, val_caps),
                                **{k: rep[k] for k in ("bleu", "bleu_1", "bleu_4", "rouge_l")}})
        model.eval()
        self.history_ = history
        self.train_loss_ = self._mean_loss(tokens, captions)
        return self

    @torch.no_grad()
    def _mean_loss(self, tokens, captions):
        tok = self.tokenizer_
        targets = tok.batch_encode(captions)
        total, n = caption_nll(self.model_.prefix(tokens), targets, self.model_.decoder, tok.pad_id)
        return total.item() / n

    @torch.no_grad()
    def _generate(self, tokens):
        tok = self.tokenizer_
        prefix = self.model_.prefix(tokens)
        ids = generate(prefix, self.model_.decoder, self.beams, self.max_tokens, tok.bos_id, tok.eos_id)
        return [tok.decode(s) for s in ids]

    def predict(self, X):
        """Generated caption strings."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        return np.array(self._generate(self._tokens(self.model_, self._prepare(X))), dtype=object)

    def predict_with_scores(self, X):
        check_is_fitted(self, "model_")
        self.model_.eval()
        tok = self.tokenizer_
        with torch.no_grad():
            prefix = self.model_.prefix(self._tokens(self.model_, self._prepare(X)))
            out = [beam_search(p, self.model_.decoder, self.beams, self.max_tokens, tok.bos_id, tok.eos_id)
                   for p in prefix]
        return [(tok.decode(ids), score) for ids, score in out]

    def score(self, X, captions):
        """Corpus BLEU (x100) of generated captions."""
        hyps = self.predict(X)
        tok = self.tokenizer_
        return caption_report([tok.split(h) for h in hyps], [tok.split(c) for c in captions])["bleu"]

    def encoder_state(self) -> dict:
        check_is_fitted(self, "model_")
        return encoder_snapshot(self.model_)

    def n_trainable_parameters(self) -> int:
        check_is_fitted(self, "model_")
        return count_parameters(self.model_)
