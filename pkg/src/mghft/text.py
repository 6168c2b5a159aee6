"""Multi-view sticker interpreter pipeline: prompt protocol against an
OpenAI-compatible chat endpoint, description caching, and pluggable text
encoders producing the four per-view sequence embeddings."""

import base64
import hashlib
import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import requests

from .checkpoint import load_archive, save_archive

VIEW_KEYS = ("intention", "style", "main_roles", "details")

DEFAULT_PROMPTS = {
    "intention": (
        "What is the intended usage scenario of this sticker? Describe the "
        "communicative intention in one or two sentences."
    ),
    "style": (
        "Describe the overall visual style of this sticker: art style, "
        "color palette, and mood."
    ),
    "main_roles": (
        "Who are the main characters or subjects in this sticker? Describe "
        "them briefly."
    ),
    "details": (
        "Describe pose, expression, and fine details of the characters in "
        "this sticker."
    ),
}

API_KEY_ENV = "MGHFT_MLLM_API_KEY"


class TextContextError(RuntimeError):
    pass


@dataclass
class ViewDescriptions:
    sticker_id: str
    intention: str
    style: str
    main_roles: str
    details: str
    generator: str = "unknown"

    def __post_init__(self):
        for key in VIEW_KEYS:
            if not getattr(self, key):
                raise TextContextError(
                    f"empty {key!r} description for sticker {self.sticker_id!r}"
                )

    def view_texts(self):
        return [getattr(self, key) for key in VIEW_KEYS]

    def to_record(self):
        return {
            "sticker_id": self.sticker_id,
            "views": {key: getattr(self, key) for key in VIEW_KEYS},
            "generator": self.generator,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            sticker_id=rec["sticker_id"],
            generator=rec.get("generator", "unknown"),
            **{key: rec["views"][key] for key in VIEW_KEYS},
        )


def write_descriptions(path, descriptions):
    """JSON Lines, one object per sticker; atomic write."""
    dirname = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            for d in descriptions:
                fh.write(json.dumps(d.to_record()) + "\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def read_descriptions(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = ViewDescriptions.from_record(json.loads(line))
            if d.sticker_id in out:
                raise TextContextError(f"duplicate sticker_id {d.sticker_id!r}")
            out[d.sticker_id] = d
    return out


@dataclass
class PromptSet:
    prompts: dict = field(default_factory=lambda: dict(DEFAULT_PROMPTS))
    multi_round: bool = True

    def __post_init__(self):
        if set(self.prompts) != set(VIEW_KEYS):
            raise TextContextError(
                f"prompt set must define exactly the views {VIEW_KEYS}"
            )

    def digest(self):
        blob = json.dumps(
            {"prompts": self.prompts, "multi_round": self.multi_round},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        return cls(
            prompts=data["prompts"], multi_round=data.get("multi_round", True)
        )


class MllmClient:
    """OpenAI-compatible chat-completions client with image input.

    One sticker is described in four sequential rounds sharing the same
    conversation; failures retry with exponential backoff.
    """

    def __init__(
        self,
        endpoint,
        model="default",
        api_key=None,
        temperature=0.2,
        max_tokens=256,
        timeout=60.0,
        retries=3,
        session=None,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.retries = retries
        self.session = session or requests.Session()
        self.sleep = sleep

    def _post(self, messages):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        delay = 1.0
        last_err = None
        for _ in range(self.retries):
            try:
                resp = self.session.post(
                    f"{self.endpoint}/chat/completions",
                    json=payload,
                    headers=headers,
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                return resp.json()
            except Exception as err:  # noqa: BLE001 - retried, then surfaced
                last_err = err
                self.sleep(delay)
                delay *= 2.0
        raise TextContextError(f"endpoint failed after {self.retries} attempts: {last_err}")

    def describe(self, image_bytes, prompts: PromptSet):
        """Run the four prompt rounds; returns {view: text}."""
        image_b64 = base64.b64encode(image_bytes).decode()
        messages = []
        out = {}
        for i, key in enumerate(VIEW_KEYS):
            content = [{"type": "text", "text": prompts.prompts[key]}]
            if i == 0:
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": f"data:image/png;base64,{image_b64}"},
                    }
                )
            messages.append({"role": "user", "content": content})
            reply = self._post(messages)
            try:
                text = reply["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as err:
                raise TextContextError(f"malformed endpoint response: {err}") from err
            if not text or not text.strip():
                raise TextContextError(f"empty description for view {key!r}")
            out[key] = text.strip()
            messages.append({"role": "assistant", "content": text})
            if not prompts.multi_round:
                messages = []
        return out


def _cache_key(image_bytes, prompts):
    img = hashlib.sha256(image_bytes).hexdigest()
    return f"{img}-{prompts.digest()[:16]}"


def generate_descriptions(
    images, client, prompts, cache_dir=None, parallel=4, generator=None
):
    """Describe a batch of images.

    ``images`` is a list of (sticker_id, image_bytes). Results are cached
    by (image content hash, prompt-set hash); cache hits skip the network.
    Returns (descriptions, errors) where errors is a list of
    {"sticker_id", "error"} records; the batch continues past failures.
    """
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
    gen_name = generator or f"mllm:{getattr(client, 'model', 'unknown')}"

    def one(item):
        sticker_id, image_bytes = item
        cache_path = None
        if cache_dir:
            cache_path = os.path.join(cache_dir, _cache_key(image_bytes, prompts) + ".json")
            if os.path.exists(cache_path):
                with open(cache_path) as fh:
                    views = json.load(fh)
                return ViewDescriptions(sticker_id=sticker_id, generator=gen_name, **views), None
        try:
            views = client.describe(image_bytes, prompts)
        except TextContextError as err:
            return None, {"sticker_id": sticker_id, "error": str(err)}
        if cache_path:
            fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                json.dump(views, fh)
            os.replace(tmp, cache_path)
        return ViewDescriptions(sticker_id=sticker_id, generator=gen_name, **views), None

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(one, images))
    else:
        results = [one(item) for item in images]
    descriptions = [d for d, _ in results if d is not None]
    errors = [e for _, e in results if e is not None]
    return descriptions, errors


# ---- encoders ----------------------------------------------------------


@dataclass
class ViewEmbeddings:
    """Per-sticker sequence embeddings T_1..T_4 plus their mean-pooled
    vectors."""

    sticker_id: str
    t: list  # 4 arrays, each (seq_len, dim)
    pooled: list  # 4 arrays, each (dim,)

    def __post_init__(self):
        if len(self.t) != 4 or len(self.pooled) != 4:
            raise TextContextError("expected exactly 4 view embeddings")


class HashEmbeddingProvider:
    """Deterministic stand-in encoder: whitespace tokens map to fixed
    seeded pseudo-random unit vectors."""

    name = "hash"

    def __init__(self, dim, seed=0):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed

    def _token_vector(self, token):
        digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def encode(self, text):
        tokens = text.split()
        if not tokens:
            raise TextContextError("cannot encode empty text")
        return np.stack([self._token_vector(tok) for tok in tokens])


class RemoteEmbeddingProvider:
    """Embedding endpoint returning one sequence matrix per input text."""

    name = "remote"

    def __init__(self, endpoint, dim, session=None, timeout=60.0):
        self.endpoint = endpoint
        self.dim = dim
        self.session = session or requests.Session()
        self.timeout = timeout

    def encode(self, text):
        resp = self.session.post(
            self.endpoint, json={"texts": [text]}, timeout=self.timeout
        )
        resp.raise_for_status()
        data = resp.json()
        seq = np.asarray(data["embeddings"][0], dtype=np.float64)
        if seq.ndim != 2 or seq.shape[1] != self.dim or seq.size == 0:
            raise TextContextError(
                f"embedding endpoint returned shape {seq.shape}, expected (n, {self.dim})"
            )
        return seq


class PrecomputedEmbeddingProvider:
    """Reads sequence embeddings from an archive keyed sticker_id/view_index."""

    name = "precomputed"

    def __init__(self, path):
        self.arrays = load_archive(path)

    def lookup(self, sticker_id, view_index):
        key = f"{sticker_id}/{view_index}"
        if key not in self.arrays:
            raise TextContextError(f"no precomputed embedding for {key!r}")
        return self.arrays[key]


def encode_views(desc: ViewDescriptions, provider, max_len=512):
    """Encode the four view texts; sequences are truncated at ``max_len``
    and mean-pooled. The provider is treated as frozen: outputs are plain
    arrays, never gradient-tracked."""
    seqs = []
    for i, text in enumerate(desc.view_texts()):
        if isinstance(provider, PrecomputedEmbeddingProvider):
            seq = provider.lookup(desc.sticker_id, i)
        else:
            seq = provider.encode(text)
        if seq.size == 0:
            raise TextContextError(
                f"provider returned empty embedding for {desc.sticker_id!r}"
            )
        seqs.append(np.asarray(seq, dtype=np.float64)[:max_len])
    pooled = [seq.mean(axis=0) for seq in seqs]
    return ViewEmbeddings(sticker_id=desc.sticker_id, t=seqs, pooled=pooled)


def save_embeddings(path, embeddings):
    """Archive keyed 'sticker_id/view_index'."""
    arrays = {}
    for emb in embeddings:
        for i, seq in enumerate(emb.t):
            arrays[f"{emb.sticker_id}/{i}"] = seq
    save_archive(path, arrays)


def load_embeddings(path):
    arrays = load_archive(path)
    by_id = {}
    for key, seq in arrays.items():
        sticker_id, idx = key.rsplit("/", 1)
        by_id.setdefault(sticker_id, {})[int(idx)] = seq
    out = {}
    for sticker_id, views in by_id.items():
        if set(views) != {0, 1, 2, 3}:
            raise TextContextError(
                f"incomplete embedding set for sticker {sticker_id!r}"
            )
        seqs = [views[i] for i in range(4)]
        out[sticker_id] = ViewEmbeddings(
            sticker_id=sticker_id,
            t=seqs,
            pooled=[s.mean(axis=0) for s in seqs],
        )
    return out
