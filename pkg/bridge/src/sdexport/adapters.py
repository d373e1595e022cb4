"""Model adapters: one real latent-diffusion path, one desk-scale mock.

Both expose the same surface: a mask-conditioned one-step generation
(noise the image to timestep t, predict noise once under the injected
attention bias, invert back to a clean image) and a patch-feature
extractor for the correspondence stage.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from . import emi


class ModelLoadError(RuntimeError):
    """Pretrained weights or their runtime are not available locally."""


def simple_tokenize(prompt: str) -> list[str]:
    return prompt.lower().split()


def word_token_indices(prompt: str, class_name: str) -> list[int]:
    tokens = simple_tokenize(prompt)
    needle = simple_tokenize(class_name)
    hits: list[int] = []
    for start in range(len(tokens) - len(needle) + 1):
        if tokens[start:start + len(needle)] == needle:
            hits.extend(range(start, start + len(needle)))
    if not hits:
        raise ValueError(f"class {class_name!r} not in prompt {prompt!r}")
    return sorted(set(hits))


def _hash_generator(*parts) -> torch.Generator:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    gen = torch.Generator("cpu")
    gen.manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF)
    return gen


def linear_alpha_bar(num_steps: int = 1000, beta_start: float = 1e-4,
                     beta_end: float = 0.02) -> torch.Tensor:
    betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    return torch.cat([torch.ones(1, dtype=torch.float64),
                      torch.cumprod(1.0 - betas, dim=0)])


class MockAdapter:
    """Weights-free stand-in exercising the full export pipeline.

    The class-token attention mass under the injected bias selects an
    image region, which the generated image pulls toward a marker
    color; features are patch-mean colors with positional channels.
    Deterministic given (inputs, seed).
    """

    name = "mock"
    version = "1"

    def __init__(self, attn_grid: int = 16, attn_dim: int = 8,
                 feature_grid: int = 16, strength: float = 0.9,
                 marker=(0.0, 1.0, 0.0), num_steps: int = 1000,
                 tau_bin: float = 0.5, self_smoothing: bool = True):
        self.attn_grid = attn_grid
        self.attn_dim = attn_dim
        self.feature_grid = feature_grid
        self.strength = strength
        self.marker = torch.tensor(marker, dtype=torch.float64)
        self.alpha_bar = linear_alpha_bar(num_steps)
        self.tau_bin = tau_bin
        self.self_smoothing = self_smoothing
        proj_gen = _hash_generator("mock-projection", attn_dim)
        self._proj = torch.randn(3 + 2, attn_dim, generator=proj_gen,
                                 dtype=torch.float64) / (3 + 2) ** 0.5

    # --- conditioning -------------------------------------------------

    def token_indices(self, prompt: str, class_name: str) -> list[int]:
        return word_token_indices(prompt, class_name)

    def _token_embeddings(self, prompt: str) -> torch.Tensor:
        vecs = []
        for token in simple_tokenize(prompt):
            gen = _hash_generator("mock-token", token)
            vecs.append(torch.randn(self.attn_dim, generator=gen,
                                    dtype=torch.float64))
        return torch.stack(vecs)

    def _grid_queries(self, x_t: torch.Tensor) -> torch.Tensor:
        g = self.attn_grid
        patches = _patch_means(x_t, g)  # (g, g, 3)
        pos = _position_channels(g, g, 1.0)
        feats = torch.cat([patches, pos], dim=2).reshape(g * g, 5)
        return feats @ self._proj

    # --- generation ---------------------------------------------------

    def generate(self, image: np.ndarray, coarse: np.ndarray, class_name: str,
                 prompt: str, t_s: int, alpha_inject: float, seed: int,
                 inject: bool = True) -> np.ndarray:
        """Mask-conditioned one-step reconstruction in pixel space."""
        x0 = torch.from_numpy(np.ascontiguousarray(image)).to(torch.float64)
        abar = float(self.alpha_bar[t_s])
        gen = _hash_generator("mock-noise", seed)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        x_t = abar ** 0.5 * x0 + (1.0 - abar) ** 0.5 * eps

        g = self.attn_grid
        queries = self._grid_queries(x_t)
        keys = self._token_embeddings(prompt)
        tokens = self.token_indices(prompt, class_name)
        alpha_raw = alpha_inject * (self.attn_dim ** 0.5)

        coarse_t = torch.from_numpy(np.ascontiguousarray(coarse)).to(torch.float64)
        mask_1d = emi.flatten_mask(coarse_t, self.tau_bin, g, g).to(torch.float64)
        a_cross = emi.cross_bias(mask_1d.to(torch.float32), tokens,
                                 keys.shape[0]).to(torch.float64) if inject else None
        attn = emi.biased_attention(queries, keys, a_cross, alpha_raw)
        fg_mass = attn[:, tokens].sum(dim=1)

        if self.self_smoothing:
            a_self = emi.self_bias(mask_1d).to(torch.float64) if inject else None
            self_attn = emi.biased_attention(queries, queries, a_self, alpha_raw)
            fg_mass = self_attn @ fg_mass

        fg = fg_mass.reshape(g, g)
        fg_full = emi.resample_nearest(fg, x0.shape[0], x0.shape[1])
        target = x0 + self.strength * fg_full[:, :, None] * (self.marker - x0)

        # one-step inversion lands exactly on the target
        eps_hat = (x_t - abar ** 0.5 * target) / (1.0 - abar) ** 0.5
        x0_hat = (x_t - (1.0 - abar) ** 0.5 * eps_hat) / abar ** 0.5
        return np.clip(x0_hat.numpy(), 0.0, 1.0).astype(np.float32)

    # --- features -----------------------------------------------------

    def extract_features(self, image: np.ndarray) -> np.ndarray:
        img = torch.from_numpy(np.ascontiguousarray(image)).to(torch.float64)
        g = self.feature_grid
        patches = _patch_means(img, g)
        pos = _position_channels(g, g, 0.25)
        feats = torch.cat([patches, pos], dim=2)
        return feats.numpy().astype(np.float32)


def _patch_means(img: torch.Tensor, grid: int) -> torch.Tensor:
    """(H, W, C) -> (grid, grid, C) average pooling with edge-safe bins."""
    h, w = img.shape[0], img.shape[1]
    ys = emi.nearest_indices(grid, h)  # pixel -> patch row
    xs = emi.nearest_indices(grid, w)
    out = torch.zeros(grid, grid, img.shape[2], dtype=torch.float64)
    counts = torch.zeros(grid, grid, 1, dtype=torch.float64)
    out.index_put_((ys[:, None].expand(h, w), xs[None, :].expand(h, w)),
                   img, accumulate=True)
    counts.index_put_((ys[:, None].expand(h, w), xs[None, :].expand(h, w)),
                      torch.ones(h, w, 1, dtype=torch.float64), accumulate=True)
    return out / counts.clamp(min=1.0)


def _position_channels(h: int, w: int, weight: float) -> torch.Tensor:
    xs = weight * (torch.arange(w, dtype=torch.float64) + 0.5) / w
    ys = weight * (torch.arange(h, dtype=torch.float64) + 0.5) / h
    px = xs[None, :, None].expand(h, w, 1)
    py = ys[:, None, None].expand(h, w, 1)
    return torch.cat([px, py], dim=2)


class StableDiffusionAdapter:
    """Real latent-diffusion path (version 2.1 family, 512x512 inputs).

    Requires locally available weights; loading them through the usual
    pipeline runtime is attempted lazily and any failure surfaces as
    ModelLoadError. The injected bias is applied inside every cross-
    and self-attention layer via a custom attention processor.
    """

    name = "sd21"
    version = "2.1"
    MODEL_ID = "stabilityai/stable-diffusion-2-1-base"
    FEATURE_MODEL_ID = "openai/clip-vit-base-patch16"

    def __init__(self, weights: str | None = None, device: str = "cpu",
                 image_size: int = 512, tau_bin: float = 0.5):
        try:
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:
            raise ModelLoadError(
                f"model-load failure: diffusion runtime unavailable ({exc})"
            ) from exc
        try:
            self.pipe = StableDiffusionPipeline.from_pretrained(
                weights or self.MODEL_ID,
                safety_checker=None,
                local_files_only=weights is not None,
            ).to(device)
        except Exception as exc:
            raise ModelLoadError(f"model-load failure: {exc}") from exc
        self.device = device
        self.image_size = image_size
        self.tau_bin = tau_bin
        self._vision = None

    # --- conditioning -------------------------------------------------

    def token_indices(self, prompt: str, class_name: str) -> list[int]:
        tokenizer = self.pipe.tokenizer
        prompt_ids = tokenizer(prompt, padding="max_length",
                               max_length=tokenizer.model_max_length,
                               truncation=True).input_ids
        class_ids = tokenizer(class_name, add_special_tokens=False).input_ids
        hits: list[int] = []
        for start in range(len(prompt_ids) - len(class_ids) + 1):
            if prompt_ids[start:start + len(class_ids)] == class_ids:
                hits.extend(range(start, start + len(class_ids)))
        if not hits:
            raise ValueError(f"class {class_name!r} not in prompt {prompt!r}")
        return sorted(set(hits))

    # --- generation ---------------------------------------------------

    def generate(self, image: np.ndarray, coarse: np.ndarray, class_name: str,
                 prompt: str, t_s: int, alpha_inject: float, seed: int,
                 inject: bool = True) -> np.ndarray:
        from PIL import Image

        pipe = self.pipe
        size = self.image_size
        pil = Image.fromarray((np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8))
        pil = pil.resize((size, size), Image.BILINEAR)
        x = torch.from_numpy(np.asarray(pil, dtype=np.float32) / 127.5 - 1.0)
        x = x.permute(2, 0, 1)[None].to(self.device)

        with torch.no_grad():
            latents = pipe.vae.encode(x).latent_dist.mode()
            latents = latents * pipe.vae.config.scaling_factor

            tokens = self.token_indices(prompt, class_name)
            text_inputs = pipe.tokenizer(
                prompt, padding="max_length",
                max_length=pipe.tokenizer.model_max_length,
                truncation=True, return_tensors="pt",
            ).to(self.device)
            prompt_embeds = pipe.text_encoder(text_inputs.input_ids)[0]

            abar = pipe.scheduler.alphas_cumprod.to(torch.float64)[t_s]
            gen = _hash_generator("sd-noise", seed)
            eps = torch.randn(latents.shape, generator=gen).to(latents)
            x_t = (abar ** 0.5).to(latents) * latents \
                + ((1 - abar) ** 0.5).to(latents) * eps

            coarse_t = torch.from_numpy(np.ascontiguousarray(coarse)).float()
            processors = _install_injection(
                pipe.unet, coarse_t, tokens, self.tau_bin,
                alpha_inject if inject else 0.0,
            )
            try:
                t_tensor = torch.tensor(t_s, device=self.device)
                eps_hat = pipe.unet(x_t, t_tensor,
                                    encoder_hidden_states=prompt_embeds).sample
            finally:
                pipe.unet.set_attn_processor(processors)

            x0_lat = (x_t - ((1 - abar) ** 0.5).to(latents) * eps_hat) \
                / (abar ** 0.5).to(latents)
            decoded = pipe.vae.decode(x0_lat / pipe.vae.config.scaling_factor).sample

        out = (decoded[0].permute(1, 2, 0).cpu().numpy() + 1.0) / 2.0
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    # --- features -----------------------------------------------------

    def extract_features(self, image: np.ndarray) -> np.ndarray:
        from PIL import Image

        if self._vision is None:
            try:
                from transformers import CLIPImageProcessor, CLIPVisionModel
            except ImportError as exc:
                raise ModelLoadError(
                    f"model-load failure: feature runtime unavailable ({exc})"
                ) from exc
            try:
                self._vision = (
                    CLIPImageProcessor.from_pretrained(self.FEATURE_MODEL_ID),
                    CLIPVisionModel.from_pretrained(self.FEATURE_MODEL_ID)
                    .to(self.device).eval(),
                )
            except Exception as exc:
                raise ModelLoadError(f"model-load failure: {exc}") from exc
        processor, model = self._vision
        pil = Image.fromarray((np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8))
        inputs = processor(images=pil, return_tensors="pt").to(self.device)
        with torch.no_grad():
            tokens = model(**inputs).last_hidden_state[0, 1:]  # drop CLS
        grid = int(tokens.shape[0] ** 0.5)
        return tokens.reshape(grid, grid, -1).cpu().numpy().astype(np.float32)


def _install_injection(unet, coarse: torch.Tensor, token_indices: list[int],
                       tau_bin: float, alpha_inject: float):
    """Swap in bias-applying processors; returns the originals."""
    from diffusers.models.attention_processor import Attention

    original = unet.attn_processors

    class InjectionProcessor:
        def __call__(self, attn: Attention, hidden_states, encoder_hidden_states=None,
                     attention_mask=None, temb=None, **kwargs):
            residual = hidden_states
            is_cross = encoder_hidden_states is not None
            context = encoder_hidden_states if is_cross else hidden_states
            query = attn.to_q(hidden_states)
            key = attn.to_k(context)
            value = attn.to_v(context)
            query = attn.head_to_batch_dim(query)
            key = attn.head_to_batch_dim(key)
            value = attn.head_to_batch_dim(value)

            q_len, k_len, d = query.shape[1], key.shape[1], query.shape[2]
            grid = int(round(q_len ** 0.5))
            mask_1d = emi.flatten_mask(coarse, tau_bin, grid, grid)
            if is_cross:
                bias = emi.cross_bias(mask_1d, token_indices, k_len)
            else:
                bias = emi.self_bias(mask_1d)
            bias = bias.to(query)
            alpha_raw = alpha_inject * (d ** 0.5)

            probs = emi.biased_attention(query.double(), key.double(),
                                         bias.double(), alpha_raw)
            hidden = (probs @ value.double()).to(value.dtype)
            hidden = attn.batch_to_head_dim(hidden)
            hidden = attn.to_out[0](hidden)
            hidden = attn.to_out[1](hidden)
            if attn.residual_connection:
                hidden = hidden + residual
            return hidden / attn.rescale_output_factor

    unet.set_attn_processor(InjectionProcessor())
    return original
