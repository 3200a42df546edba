"""Pluggable model backends for the data pipeline and benchmark.

A backend spec is either ``stub:<seed>`` (deterministic, in-process) or
``http:<base-url>`` (external service speaking the JSON contract below).
Stub backends exist so every orchestration path runs and re-runs
byte-identically without any trained model.

HTTP contract: POST <base-url> with JSON
    {"task": ..., "prompt": ..., "instruction": ..., "images": [b64 PNG], "seed": int}
-> {"status": "ok", "images": [b64 PNG], "text": ...}
Bearer token comes from configuration or the environment.
"""

from __future__ import annotations

import base64
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from ..dit import DiTConfig, DiTParams, LatentShape, embed_text, init_params
from ..encoding import EncodingScheme
from ..errors import BackendError, ConfigError
from ..flow import Condition, SamplerConfig, dual_branch_generate, euler_sample
from ..tensor import SeededRng
from . import images
from .keywords import CATEGORIES, VOCAB, Keyword

HTTP_TIMEOUT_S = 30.0


def _hash_int(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def png_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def b64_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


TOY_BACKEND_CONFIG = DiTConfig(
    d_model=16,
    num_heads=2,
    num_blocks=2,
    latent=LatentShape(4, 4, 3),
    mlp_hidden=32,
    max_text_len=6,
)


def toy_backend_params(seed: int) -> DiTParams:
    """The tiny trunk the stub generators sample from."""
    return init_params(TOY_BACKEND_CONFIG, SeededRng(seed).child(0xD17))


class HttpBackend:
    """Client half of the backend wire contract."""

    def __init__(self, base_url: str, token: str | None = None):
        if not base_url:
            raise ConfigError("http backend needs a base URL")
        self.base_url = base_url
        self.token = token

    def call(self, task: str, *, prompt: str = "", instruction: str = "",
             image_arrays: list[np.ndarray] | None = None, seed: int = 0) -> dict:
        payload = {
            "task": task,
            "prompt": prompt,
            "instruction": instruction,
            "images": [png_b64(a) for a in (image_arrays or [])],
            "seed": int(seed),
        }
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            resp = requests.post(self.base_url, json=payload, headers=headers,
                                 timeout=HTTP_TIMEOUT_S)
        except requests.RequestException as e:
            raise BackendError(f"{task}: request to {self.base_url} failed: {e}") from e
        if resp.status_code != 200:
            raise BackendError(f"{task}: backend returned HTTP {resp.status_code}")
        body = resp.json()
        if body.get("status") != "ok":
            raise BackendError(f"{task}: backend status {body.get('status')!r}")
        return body


class _StubBase:
    def __init__(self, seed: int, fail_items: frozenset[int] = frozenset()):
        self.seed = int(seed)
        self.fail_items = fail_items

    def _check_fault(self, item: int) -> None:
        if item in self.fail_items:
            raise BackendError(f"injected failure for item {item}")


class T2IBackend(_StubBase):
    """Image source: single renders are procedural patterns; pairs come from
    the dual-branch toy sampler so the shared-element path is exercised."""

    kind = "t2i"

    def __init__(self, seed, fail_items=frozenset(), image_size: int = 64):
        super().__init__(seed, fail_items)
        self.image_size = image_size
        self._params = None

    def generate(self, prompt: str, seed: int, item: int = -1) -> np.ndarray:
        self._check_fault(item)
        return images.render_pattern(f"{self.seed}|{prompt}|{seed}", self.image_size)

    def generate_pair(self, prompt_a: str, prompt_b: str, seed: int, item: int = -1):
        self._check_fault(item)
        if self._params is None:
            self._params = toy_backend_params(self.seed)
        cfg = SamplerConfig(steps=3, seed=seed % (2**32))
        tar, src = dual_branch_generate(self._params, prompt_a, prompt_b, cfg, mixing=True)
        cell = max(4, self.image_size // tar.shape[0])
        return images.latent_to_image(tar, cell), images.latent_to_image(src, cell)


class HttpT2I:
    kind = "t2i"

    def __init__(self, client: HttpBackend):
        self.client = client

    def generate(self, prompt, seed, item=-1):
        body = self.client.call("t2i", prompt=prompt, seed=seed)
        return b64_png(body["images"][0])

    def generate_pair(self, prompt_a, prompt_b, seed, item=-1):
        body = self.client.call("t2i_pair", prompt=prompt_a, instruction=prompt_b, seed=seed)
        return b64_png(body["images"][0]), b64_png(body["images"][1])


class ExtractorBackend(_StubBase):
    """Re-renders the selected element of an image as a fresh reference."""

    kind = "extractor"

    def extract(self, img: np.ndarray, keyword: Keyword, seed: int, item: int = -1) -> np.ndarray:
        self._check_fault(item)
        return images.tint(
            images.center_crop_resize(img), f"{self.seed}|{keyword.text}|{seed}"
        )


class HttpExtractor:
    kind = "extractor"

    def __init__(self, client: HttpBackend):
        self.client = client

    def extract(self, img, keyword, seed, item=-1):
        body = self.client.call("extract", prompt=keyword.text, image_arrays=[img], seed=seed)
        return b64_png(body["images"][0])


class EditorBackend(_StubBase):
    """Alters the keyword-defined content, producing the source image."""

    kind = "editor"

    def edit(self, img: np.ndarray, instruction: str, seed: int, item: int = -1) -> np.ndarray:
        self._check_fault(item)
        return images.recolor_region(img, f"{self.seed}|{instruction}|{seed}")


class HttpEditor:
    kind = "editor"

    def __init__(self, client: HttpBackend):
        self.client = client

    def edit(self, img, instruction, seed, item=-1):
        body = self.client.call("edit", instruction=instruction, image_arrays=[img], seed=seed)
        return b64_png(body["images"][0])


_SCENES = ("a sunlit loft", "a rainy street market", "a quiet library", "a coastal terrace",
           "a winter cabin", "a noisy workshop")
_ADJS = ("weathered", "polished", "vivid", "muted", "ornate", "minimal")


class LLMBackend(_StubBase):
    """Template-filling instruction writer."""

    kind = "llm"

    def compose(self, task: str, slots: dict, seed: int, item: int = -1) -> str:
        self._check_fault(item)
        rng = SeededRng(_hash_int(self.seed, task, seed))
        scene = _SCENES[rng.integers(0, len(_SCENES))]
        adj = _ADJS[rng.integers(0, len(_ADJS))]
        kw: Keyword | None = slots.get("keyword")
        if task == "pair_prompt_a":
            return f"{scene} featuring a {adj} {kw.text}"
        if task == "pair_prompt_b":
            scene2 = _SCENES[rng.integers(0, len(_SCENES))]
            return f"{scene2} with the very same {kw.text}"
        if task == "target_prompt":
            extras = ", ".join(k.text for k in slots.get("extra_keywords", []))
            tail = f" alongside {extras}" if extras else ""
            return f"A {adj} photo of {scene} centered on a {kw.text}{tail}"
        if task == "edit_instruction":
            if kw.category == "concrete-object":
                return f"Replace the {kw.text} in the image with the {kw.text} from image 1"
            if kw.category == "abstract-local":
                return f"Make the {kw.text} of the main object match the {kw.text} in image 1"
            return f"Give the whole image the same {kw.text} as image 1"
        if task == "gen_instruction":
            parts = [f"the {k.text} follows image {i}" for i, k in
                     enumerate(slots["ref_keywords"], start=1)]
            return "Generate an image where " + " and ".join(parts)
        raise BackendError(f"llm stub does not know task {task!r}")


class HttpLLM:
    kind = "llm"

    def __init__(self, client: HttpBackend):
        self.client = client

    def compose(self, task, slots, seed, item=-1):
        kw = slots.get("keyword")
        prompt = kw.text if kw is not None else ""
        return self.client.call(f"llm_{task}", prompt=prompt, seed=seed)["text"]


class VLMBackend(_StubBase):
    """Keyword extraction and refined single-image descriptions."""

    kind = "vlm"

    def keywords_for_caption(self, caption: str, k: int, seed: int, item: int = -1) -> list[Keyword]:
        self._check_fault(item)
        found = []
        lowered = caption.lower()
        for cat in CATEGORIES:
            for word in VOCAB[cat]:
                if word in lowered:
                    found.append(Keyword(word, cat))
        rng = SeededRng(_hash_int(self.seed, "kw", caption, seed))
        while len(found) < k:
            cat = CATEGORIES[rng.integers(0, len(CATEGORIES))]
            words = VOCAB[cat]
            cand = Keyword(words[rng.integers(0, len(words))], cat)
            if all(c.text != cand.text for c in found):
                found.append(cand)
        return found[:k]

    def describe(self, image_key: str, position: int, seed: int = 0, item: int = -1) -> str:
        self._check_fault(item)
        rng = SeededRng(_hash_int(self.seed, "desc", image_key, position, seed))
        adj = _ADJS[rng.integers(0, len(_ADJS))]
        noun = VOCAB["concrete-object"][rng.integers(0, len(VOCAB["concrete-object"]))]
        tex = VOCAB["abstract-local"][rng.integers(0, len(VOCAB["abstract-local"]))]
        return f"a {adj} {noun} with a distinctive {tex}"


class HttpVLM:
    kind = "vlm"

    def __init__(self, client: HttpBackend):
        self.client = client

    def keywords_for_caption(self, caption, k, seed, item=-1):
        body = self.client.call("vlm_keywords", prompt=caption, seed=seed)
        parts = [p.strip() for p in body["text"].split(";") if p.strip()]
        out = []
        for part in parts[:k]:
            cat, _, text = part.partition(":")
            out.append(Keyword(text.strip() or part, cat.strip() if cat.strip() in CATEGORIES else "concrete-object"))
        return out

    def describe(self, image_key, position, seed=0, item=-1):
        return self.client.call("vlm_describe", prompt=str(image_key), seed=seed)["text"]


class RealImageStore:
    """Directory of PNGs with .txt caption sidecars."""

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root else None
        self._items: list[tuple[Path, str]] = []
        if self.root is not None and self.root.is_dir():
            for png in sorted(self.root.glob("*.png")):
                caption_file = png.with_suffix(".txt")
                caption = caption_file.read_text(encoding="utf-8").strip() if caption_file.exists() else ""
                self._items.append((png, caption))

    def __len__(self) -> int:
        return len(self._items)

    def pick(self, rng: SeededRng) -> tuple[Path, str]:
        if not self._items:
            raise ConfigError("real image store is empty")
        return self._items[rng.integers(0, len(self._items))]


@dataclass
class BackendRegistry:
    t2i: object
    extractor: object
    editor: object
    llm: object
    vlm: object
    real_image_store: RealImageStore = field(default_factory=lambda: RealImageStore(None))
    spec: dict = field(default_factory=dict)


_STUB_CLASSES = {
    "t2i": T2IBackend,
    "extractor": ExtractorBackend,
    "editor": EditorBackend,
    "llm": LLMBackend,
    "vlm": VLMBackend,
}
_HTTP_CLASSES = {
    "t2i": HttpT2I,
    "extractor": HttpExtractor,
    "editor": HttpEditor,
    "llm": HttpLLM,
    "vlm": HttpVLM,
}


def parse_backend(role: str, spec: str, *, token: str | None = None,
                  fail_items: frozenset[int] = frozenset(), image_size: int = 64):
    if spec.startswith("stub:"):
        seed = int(spec.split(":", 1)[1])
        cls = _STUB_CLASSES[role]
        if role == "t2i":
            return cls(seed, fail_items, image_size)
        return cls(seed, fail_items)
    if spec.startswith("http:") or spec.startswith("https:"):
        url = spec if spec.startswith("https:") else spec.split(":", 1)[1]
        return _HTTP_CLASSES[role](HttpBackend(url, token))
    raise ConfigError(f"backend {role}: spec {spec!r} must be stub:<seed> or http:<base-url>")


def build_registry(spec: dict, *, token: str | None = None,
                   fault_injection: dict[str, list[int]] | None = None,
                   image_size: int = 64) -> BackendRegistry:
    faults = fault_injection or {}
    roles = {}
    for role in ("t2i", "extractor", "editor", "llm", "vlm"):
        if role not in spec:
            raise ConfigError(f"backend registry is missing the {role!r} entry")
        roles[role] = parse_backend(
            role, spec[role], token=token,
            fail_items=frozenset(faults.get(role, [])), image_size=image_size,
        )
    store = RealImageStore(spec.get("real_image_store"))
    return BackendRegistry(
        t2i=roles["t2i"], extractor=roles["extractor"], editor=roles["editor"],
        llm=roles["llm"], vlm=roles["vlm"], real_image_store=store, spec=dict(spec),
    )
