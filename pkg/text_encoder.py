import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

from errors import DataValidationError, DatasetError
from nn import Parameter, ParameterStore
from tensor import Tensor, avg_pool_words, embedding, linear, sigmoid, stack, tanh

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocabulary:
    """Token <-> id map with PAD=0 and UNK=1 reserved ahead of the regular tokens."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: List[str] = [PAD_TOKEN, UNK_TOKEN]
        self.token_to_id: Dict[str, int] = {}
        for token in tokens:
            if token in self.token_to_id or token in (PAD_TOKEN, UNK_TOKEN):
                raise DataValidationError(f"duplicate vocabulary token '{token}'")
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DatasetError(f"cannot read vocabulary: {e}", path) from e
        return cls([line.strip() for line in lines if line.strip()])

    def to_file(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.write_text("\n".join(self.id_to_token[2:]) + "\n", encoding="utf-8")
        except OSError as e:
            raise DatasetError(f"cannot write vocabulary: {e}", path) from e
        return path


@dataclass(frozen=True)
class Query:
    text: str
    ids: Tuple[int, ...]


def tokenize(text: str, vocab: Vocabulary, n_max: int = 20) -> Query:
    words = text.lower().split()
    if not words:
        raise DataValidationError("query text is empty")
    return Query(text=text, ids=tuple(vocab.lookup(w) for w in words[:n_max]))


@dataclass
class WordFeatures:
    L: Tensor  # N x C_L

    @property
    def pooled(self) -> Tensor:
        return avg_pool_words(self.L)

    @property
    def n_words(self) -> int:
        return self.L.shape[0]


def build_embedding(store: ParameterStore, vocab_size: int, dim: int) -> Parameter:
    return store.create("text.embedding", (vocab_size, dim), fan_in=dim, shared=True)


class GruTextEncoder:
    """
    Single-layer unidirectional GRU over word embeddings.

    Row t of L is the hidden state after word t; the recurrence starts from h_0 = 0
    and only runs over the true query length.
    """

    def __init__(self, store: ParameterStore, prefix: str, embedding_table: Parameter, hidden: int):
        self.prefix = prefix
        self.embedding = embedding_table
        self.hidden = hidden
        embed_dim = embedding_table.shape[1]
        for gate in ("z", "r", "h"):
            setattr(self, f"w_{gate}", store.create(f"{prefix}.w_{gate}", (embed_dim, hidden)))
            setattr(self, f"u_{gate}", store.create(f"{prefix}.u_{gate}", (hidden, hidden)))
            setattr(self, f"b_{gate}", store.create(f"{prefix}.b_{gate}", (hidden,), zeros=True))

    def encode(self, query: Query) -> WordFeatures:
        x = embedding(self.embedding, query.ids)
        xz = linear(x, self.w_z, self.b_z)
        xr = linear(x, self.w_r, self.b_r)
        xh = linear(x, self.w_h, self.b_h)

        h = Tensor([0.0] * self.hidden)
        rows = []
        for t in range(len(query.ids)):
            z = sigmoid(xz[t] + linear(h, self.u_z))
            r = sigmoid(xr[t] + linear(h, self.u_r))
            candidate = tanh(xh[t] + linear(r * h, self.u_h))
            h = (1.0 - z) * h + z * candidate
            rows.append(h)
        return WordFeatures(L=stack(rows, axis=0))


def gru_encode(query: Query, encoder: GruTextEncoder) -> WordFeatures:
    return encoder.encode(query)
