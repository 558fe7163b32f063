"""
Model Service.
Word-level tokenization over the expanded vocabulary and a small decoder-only
transformer trained with the masked next-token objective.
"""
import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.nn import functional as F

from src.config.settings import ModelConfig
from src.exceptions.base import ContractViolation
from src.repositories.artifact_repository import read_checkpoint, write_checkpoint
from src.services.corpus_service import InstructionExample
from src.services.sid_service import Vocabulary
from src.utils.string_utils import split_words

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

def word_tokenize(text: str, vocab: Vocabulary) -> List[int]:
    """SID tokens whole, other text lowercased into words and punctuation; unknown -> <unk>."""
    unk = vocab.unk_id
    return [vocab.id_of.get(piece, unk) for piece in split_words(text)]


def detokenize(token_ids: Sequence[int], vocab: Vocabulary) -> str:
    """Space-joined tokens, with adjacent SID tokens concatenated."""
    out: List[str] = []
    previous_sid = False
    for token_id in token_ids:
        token = vocab.token(int(token_id))
        is_sid = vocab.is_sid(int(token_id))
        if is_sid and previous_sid:
            out[-1] += token
        else:
            out.append(token)
        previous_sid = is_sid
    return " ".join(out)


def normalize_text(text: str) -> str:
    """Comparison form of free text under this tokenizer."""
    return " ".join(split_words(text))


def encode_prompt(instruction: str, vocab: Vocabulary) -> List[int]:
    """<bos> X <sep>: the decoding context for an instruction."""
    return [vocab.bos_id] + word_tokenize(instruction, vocab) + [vocab.sep_id]


def encode_example(example: InstructionExample, vocab: Vocabulary) -> Tuple[List[int], List[int]]:
    """(prompt ids, response ids + <eos>)."""
    return encode_prompt(example.instruction, vocab), word_tokenize(example.response, vocab) + [vocab.eos_id]


@dataclass
class Batch:
    input_ids: torch.Tensor
    targets: torch.Tensor
    loss_mask: torch.Tensor

    def __len__(self) -> int:
        return int(self.input_ids.shape[0])


def make_batch(pairs: Sequence[Tuple[List[int], List[int]]], pad_id: int) -> Batch:
    """Right-padded inputs/targets; the mask is 1 only where the target is a response token."""
    if not pairs:
        raise ContractViolation("cannot build an empty batch")
    length = max(len(p) + len(r) - 1 for p, r in pairs)
    inputs = torch.full((len(pairs), length), pad_id, dtype=torch.long)
    targets = torch.full((len(pairs), length), pad_id, dtype=torch.long)
    mask = torch.zeros((len(pairs), length), dtype=torch.float32)
    for row, (prompt, response) in enumerate(pairs):
        sequence = prompt + response
        n = len(sequence) - 1
        inputs[row, :n] = torch.tensor(sequence[:-1])
        targets[row, :n] = torch.tensor(sequence[1:])
        mask[row, len(prompt) - 1:n] = 1.0
    return Batch(input_ids=inputs, targets=targets, loss_mask=mask)


def sequence_length(pair: Tuple[List[int], List[int]]) -> int:
    """Model input length needed to train on a (prompt, response) pair."""
    return len(pair[0]) + len(pair[1]) - 1


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        self.dropout = cfg.dropout
        self.resid_dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, dim = x.shape
        q, k, v = self.qkv(x).split(dim, dim=2)
        q, k, v = (t.view(batch, length, self.heads, dim // self.heads).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True,
                                           dropout_p=self.dropout if self.training else 0.0)
        y = y.transpose(1, 2).contiguous().view(batch, length, dim)
        return self.resid_dropout(self.proj(y))


class Block(nn.Module):
    """Pre-norm attention and feed-forward with residuals."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = int(round(cfg.dim * cfg.ffn_mult))
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, cfg.dim),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class MiniRecModel(nn.Module):
    """Decoder-only recommender over words and SID tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.vocab_size < 1:
            raise ContractViolation("model vocab_size must be set before building")
        if cfg.dim % cfg.heads:
            raise ContractViolation("model dim must be divisible by heads")
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.layers)])
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = None if cfg.tie_embeddings else nn.Linear(cfg.dim, cfg.vocab_size, bias=False)
        self.apply(self._init_weights)
        self.register_buffer("step", torch.zeros((), dtype=torch.long), persistent=True)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def output_weight(self) -> torch.Tensor:
        return self.tok_emb.weight if self.head is None else self.head.weight

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        """Logits of shape (batch, length, vocab)."""
        length = input_ids.shape[1]
        if length > self.cfg.max_seq:
            raise ContractViolation(f"sequence length {length} exceeds max_seq {self.cfg.max_seq}")
        positions = torch.arange(length, device=input_ids.device)
        x = self.drop(self.tok_emb(input_ids) + self.pos_emb(positions)[None, :, :])
        for block in self.blocks:
            x = block(x)
        return F.linear(self.ln_f(x), self.output_weight())

    @torch.no_grad()
    def next_log_probs(self, prefixes: torch.Tensor) -> torch.Tensor:
        """Log-softmax over the vocabulary at the last position of each prefix."""
        return F.log_softmax(self(prefixes)[:, -1, :].double(), dim=-1)

    @torch.no_grad()
    def inject_embeddings(self, pre_rows: Optional[np.ndarray], sid_rows: Optional[np.ndarray],
                          sid_offset: int) -> None:
        """Overwrite token-embedding rows with externally computed initial values."""
        weight = self.tok_emb.weight
        if pre_rows is not None:
            if pre_rows.shape != (sid_offset, self.cfg.dim):
                raise ContractViolation(f"pre-token rows {pre_rows.shape} != ({sid_offset}, {self.cfg.dim})")
            weight[:sid_offset] = torch.as_tensor(pre_rows, dtype=weight.dtype)
        if sid_rows is not None:
            expected = (self.cfg.vocab_size - sid_offset, self.cfg.dim)
            if sid_rows.shape != expected:
                raise ContractViolation(f"SID rows {sid_rows.shape} != {expected}")
            weight[sid_offset:] = torch.as_tensor(sid_rows, dtype=weight.dtype)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(cfg: ModelConfig) -> MiniRecModel:
    """Freshly initialized model; parameters depend only on cfg.seed."""
    torch.manual_seed(cfg.seed)
    model = MiniRecModel(cfg)
    logger.info(f"Built model: {model.parameter_count()} parameters, vocab {cfg.vocab_size}, "
                f"dim {cfg.dim}, {cfg.layers} layers, tied={cfg.tie_embeddings}")
    return model


def forward_logits(model: MiniRecModel, prefix: Sequence[int]) -> torch.Tensor:
    """Log-probabilities over the vocabulary for the token after ``prefix``."""
    if len(prefix) == 0:
        raise ContractViolation("prefix must hold at least one token")
    if len(prefix) > model.cfg.max_seq:
        raise ContractViolation(f"prefix length {len(prefix)} exceeds max_seq {model.cfg.max_seq}")
    was_training = model.training
    model.eval()
    try:
        return model.next_log_probs(torch.tensor([list(prefix)], dtype=torch.long))[0]
    finally:
        model.train(was_training)


def sft_loss(model: MiniRecModel, batch: Batch) -> torch.Tensor:
    """Mean negative log-likelihood over masked (response) positions."""
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    total = batch.loss_mask.sum()
    if total.item() == 0:
        raise ContractViolation("loss mask selects no positions")
    logits = model(batch.input_ids)
    log_probs = F.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(-1, batch.targets.unsqueeze(-1)).squeeze(-1)
    mask = batch.loss_mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum()


def grad_check(model: MiniRecModel, batch: Batch, h: float = 1e-5, max_params: int = 5000) -> float:
    """
    Largest relative error between autograd gradients and central finite
    differences, computed on a float64 copy of ``model``.
    """
    probe = copy.deepcopy(model).double().eval()
    params = [p for p in probe.parameters() if p.requires_grad]
    total = sum(p.numel() for p in params)
    if total > max_params:
        raise ContractViolation(f"grad_check is limited to {max_params} parameters, model has {total}")

    probe.zero_grad()
    sft_loss(probe, batch).backward()
    analytic = [p.grad.detach().clone() for p in params]

    worst = 0.0
    with torch.no_grad():
        for param, grad in zip(params, analytic):
            flat = param.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = sft_loss(probe, batch).item()
                flat[i] = original - h
                minus = sft_loss(probe, batch).item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * h)
                exact = grad.view(-1)[i].item()
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-6)
                worst = max(worst, error)
    logger.info(f"grad_check over {total} parameters: max relative error {worst:.3e}")
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model: MiniRecModel, meta: Optional[Dict] = None) -> None:
    tensors = {name: t.detach().cpu().float().numpy() for name, t in model.state_dict().items()
               if name != "step"}
    write_checkpoint(path, asdict(model.cfg), tensors, {**(meta or {}), "step": int(model.step.item())})


def load_model(path) -> Tuple[MiniRecModel, Dict]:
    config, meta, tensors = read_checkpoint(path)
    cfg = ModelConfig(**config)
    model = MiniRecModel(cfg)
    state = {name: torch.from_numpy(array) for name, array in tensors.items()}
    state["step"] = torch.tensor(int(meta.get("step", 0)), dtype=torch.long)
    model.load_state_dict(state)
    model.eval()
    return model, meta


def uniform_log_prob(vocab_size: int) -> float:
    return math.log(1.0 / vocab_size)
