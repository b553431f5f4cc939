"""Run-directory orchestration: stage execution, artifact layout,
prerequisite checks, and checkpoint loading. The CLI is a thin wrapper over
this module, so library runs and CLI runs produce identical bytes.

Layout under a run root:
    config.json                resolved config (hash recorded everywhere)
    corpus/                    rendered samples + manifest
    prior/                     reconstructor.w, generator2d.w (+ .json meta)
    pseudo_gt/                 supervision records + manifest
    shape/ texture/ refine/    stage checkpoints + loss curves
    eval/report.json|csv       metric report
    meshes/                    exported PLYs and inversion reports
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import torch

from .applications import GeneratorState
from .config import RunConfig
from .corpus import CorpusSet, generate_corpus
from .errors import MissingPrerequisite
from .fileio import load_state_dict_from, save_checkpoint, write_manifest
from .prior import (PseudoGTSet, Reconstructor, extract_pseudo_gt,
                    train_2d_generator, train_reconstructor)
from .nets import StyleGenerator
from .refinement import RefinerNet, train_refine_stage
from .shape_branch import ShapeGenerator, train_shape_stage
from .texture_branch import TextureGenerator, train_texture_stage

STAGES = ("corpus", "prior", "pseudo_gt", "shape", "texture", "refine")


class RunDir:
    def __init__(self, root, cfg: RunConfig | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        cfg_path = self.root / "config.json"
        if cfg is None:
            if not cfg_path.exists():
                raise MissingPrerequisite(str(cfg_path))
            cfg = RunConfig.load(cfg_path)
        elif not cfg_path.exists():
            cfg.save(cfg_path)
        else:
            saved = RunConfig.load(cfg_path)
            if saved.config_hash != cfg.config_hash:
                # flag overrides are legal; artifacts record the hash that
                # actually produced them
                print(f"note: overriding run config {saved.config_hash} "
                      f"with {cfg.config_hash} for this invocation", file=sys.stderr)
        self.cfg = cfg
        torch.set_num_threads(max(1, cfg.torch_threads))

    # -- paths -------------------------------------------------------------
    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def _require(self, rel: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingPrerequisite(str(p))
        return p

    def _stage_done(self, stage: str, extra: dict | None = None) -> None:
        meta = {"stage": stage, "config_hash": self.cfg.config_hash, "seed": self.cfg.seed}
        if extra:
            meta.update(extra)
        write_manifest(self.path(stage if stage != "pseudo_gt" else "pseudo_gt",
                                 "stage.json"), meta)

    # -- stages ------------------------------------------------------------
    def run_corpus(self) -> dict:
        manifest = generate_corpus(self.cfg.corpus_n, self.cfg.seed,
                                   self.path("corpus"), self.cfg.corpus_resolution)
        self._stage_done("corpus", {"n": self.cfg.corpus_n})
        return manifest

    def run_train_prior(self):
        self._require("corpus/manifest.json")
        corpus = self.corpus_set()
        out = self.path("prior")
        out.mkdir(exist_ok=True)
        recon, recon_log = train_reconstructor(corpus, self.cfg, out)
        meta = {"config_hash": self.cfg.config_hash, "seed": self.cfg.seed,
                "steps": self.cfg.recon_steps}
        save_checkpoint(out / "reconstructor.w", recon, meta)
        g2d, g2d_log = train_2d_generator(corpus, self.cfg, out)
        save_checkpoint(out / "generator2d.w", g2d,
                        {**meta, "steps": self.cfg.gan2d_steps})
        write_manifest(out / "training_log.json",
                       {"reconstructor": recon_log, "generator2d": g2d_log})
        self._stage_done("prior")
        return recon, g2d

    def run_extract_priors(self) -> dict:
        self._require("corpus/manifest.json")
        self._require("prior/reconstructor.w")
        self._require("prior/generator2d.w")
        manifest = extract_pseudo_gt(self.load_reconstructor(), self.load_generator2d(),
                                     self.corpus_set(), self.cfg.pgt_corpus,
                                     self.cfg.pgt_synth, self.cfg.seed,
                                     self.path("pseudo_gt"))
        self._stage_done("pseudo_gt")
        return manifest

    def run_train_shape(self):
        self._require("pseudo_gt/manifest.json")
        self._require("prior/reconstructor.w")
        recon = self.load_reconstructor()
        gen, disc, log = train_shape_stage(self.pgt_set(), recon.f_s, self.cfg,
                                           self.path("shape"))
        self._stage_done("shape")
        return gen, disc, log

    def run_train_texture(self):
        self._require("shape/shape_generator.w")
        recon = self.load_reconstructor()
        shape_gen = self.load_shape_generator()
        gen, disc, log = train_texture_stage(self.pgt_set(), shape_gen, recon.f_s,
                                             recon.f_t, self.cfg, self.path("texture"))
        self._stage_done("texture")
        return gen, disc, log

    def run_train_refine(self):
        self._require("texture/texture_generator.w")
        recon = self.load_reconstructor()
        state = self.load_state(require_refiner=False)

        def student_fields(latent: np.ndarray):
            _, f_sv, _, f_tv = state.fields(latent, latent)
            return f_sv, f_tv

        g_r, log = train_refine_stage(recon, self.pgt_set(), self.corpus_set(),
                                      student_fields, self.cfg, self.path("refine"))
        self._stage_done("refine")
        return g_r, log

    def run_evaluate(self, state=None, seed: int | None = None):
        from .evaluation import evaluate_model

        self._require("refine/refiner.w")
        state = state or self.load_state(require_refiner=True)
        report = evaluate_model(state, self.load_reconstructor(), self.pgt_set(),
                                self.corpus_set(), self.cfg, seed)
        out = self.path("eval")
        out.mkdir(exist_ok=True)
        write_manifest(out / "report.json", report.to_dict())
        (out / "report.csv").write_text(
            "cov,mmd,fpd,fid,fid3d,config_hash\n" + report.csv_row() + "\n")
        return report

    # -- loaders -----------------------------------------------------------
    def corpus_set(self) -> CorpusSet:
        self._require("corpus/manifest.json")
        return CorpusSet(self.path("corpus"))

    def pgt_set(self) -> PseudoGTSet:
        self._require("pseudo_gt/manifest.json")
        return PseudoGTSet(self.path("pseudo_gt"))

    def load_reconstructor(self) -> Reconstructor:
        path = self._require("prior/reconstructor.w")
        recon = Reconstructor(self.cfg)
        load_state_dict_from(path, recon)
        recon.eval()
        for p in recon.parameters():
            p.requires_grad_(False)
        return recon

    def load_generator2d(self) -> StyleGenerator:
        path = self._require("prior/generator2d.w")
        gen = StyleGenerator(self.cfg.latent_dim, self.cfg.style_dim, 3,
                             self.cfg.image_size, self.cfg.gen_base, sigmoid_out=True)
        load_state_dict_from(path, gen)
        gen.eval()
        for p in gen.parameters():
            p.requires_grad_(False)
        return gen

    def load_shape_generator(self) -> ShapeGenerator:
        path = self._require("shape/shape_generator.w")
        gen = ShapeGenerator(self.cfg)
        load_state_dict_from(path, gen)
        gen.eval()
        for p in gen.parameters():
            p.requires_grad_(False)
        return gen

    def load_texture_generator(self) -> TextureGenerator:
        path = self._require("texture/texture_generator.w")
        gen = TextureGenerator(self.cfg)
        load_state_dict_from(path, gen)
        gen.eval()
        for p in gen.parameters():
            p.requires_grad_(False)
        return gen

    def load_refiner(self) -> RefinerNet:
        path = self._require("refine/refiner.w")
        g_r = RefinerNet(self.cfg.unet_base)
        load_state_dict_from(path, g_r)
        g_r.eval()
        for p in g_r.parameters():
            p.requires_grad_(False)
        return g_r

    def load_state(self, require_refiner: bool = False) -> GeneratorState:
        recon = self.load_reconstructor()
        refiner = None
        if self.path("refine/refiner.w").exists():
            refiner = self.load_refiner()
        elif require_refiner:
            raise MissingPrerequisite(str(self.path("refine/refiner.w")))
        return GeneratorState(cfg=self.cfg, shape_gen=self.load_shape_generator(),
                              tex_gen=self.load_texture_generator(),
                              f_s=recon.f_s, f_t=recon.f_t,
                              refiner=refiner, recon=recon)

    def run_all(self):
        """Corpus through refinement in order (no evaluation)."""
        self.run_corpus()
        self.run_train_prior()
        self.run_extract_priors()
        self.run_train_shape()
        self.run_train_texture()
        self.run_train_refine()
