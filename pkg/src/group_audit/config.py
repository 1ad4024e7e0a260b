"""Run configuration: one YAML file plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from .domain import (PRESET_SETTINGS, AuditConfig, ConfigError, FormulaProfile, GroupSignature,
                     get_profile)
from .synthgen import GeneratorSpec, InvalidSpec, PlantedInteraction, default_spec

TOP_KEYS = {"profile", "years", "seed", "synth", "forest", "report", "out", "threads"}
SYNTH_KEYS = {"n_persons", "market_count", "market_effects", "base_spend", "effects", "prevalence",
              "noise", "noise_scale", "planted", "hcc_map"}
FOREST_KEYS = {"n_trees", "mtry", "settings", "threshold", "top_k"}
REPORT_KEYS = {"per_year"}


@dataclass(frozen=True)
class RunConfig:
    source: str
    audit: AuditConfig
    generator: GeneratorSpec
    out: Path
    threads: int
    per_year: bool
    raw: dict

    @property
    def seed(self) -> int:
        return self.audit.master_seed

    def run_dir(self) -> Path:
        """``<out>/<config hash>-seed<seed>``; the hash ignores seed, out and threads."""
        keyed = {k: v for k, v in self.raw.items() if k not in ("seed", "out", "threads")}
        forest = dict(keyed.get("forest") or {})
        forest.pop("settings", None)
        keyed["forest"] = forest
        digest = hashlib.sha256(json.dumps(keyed, sort_keys=True, default=str).encode()).hexdigest()
        return self.out / f"{digest[:12]}-seed{self.seed}"


def _section(raw: dict, key: str, allowed: set[str], source: str) -> dict:
    sec = raw.get(key) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{source}: '{key}' must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"{source}: unknown field {key}.{sorted(unknown)[0]}")
    return sec


def _profile(value, source: str) -> FormulaProfile:
    if value is None or isinstance(value, str):
        return get_profile(value or "marketplaces")
    if isinstance(value, dict):
        try:
            return FormulaProfile(
                name="custom",
                age_bands=tuple(value["age_bands"]),
                hcc_count=int(value["hcc_count"]),
                component_labels=tuple(value["component_labels"]),
                prospective=bool(value.get("prospective", False)),
                market_role=str(value.get("market_role", "MSA")),
            )
        except KeyError as exc:
            raise ConfigError(f"{source}: profile.{exc.args[0]} is required for a custom profile") from None
    raise ConfigError(f"{source}: profile must be a name or a mapping")


def _settings(value, source: str) -> tuple[tuple[int, int], ...]:
    if value is None or value == "preset":
        return PRESET_SETTINGS
    try:
        return tuple(parse_setting(v) if isinstance(v, str) else (int(v[0]), int(v[1])) for v in value)
    except (TypeError, ValueError, IndexError):
        raise ConfigError(f"{source}: forest.settings must be 'preset' or a list of [min, max] pairs") from None


def parse_setting(text: str) -> tuple[int, int]:
    """``"100x8"`` -> ``(100, 8)``."""
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"--setting: expected MINxMAX such as 100x8, got {text!r}") from None


def load_config(path, *, seed=None, threads=None, setting=None, profile=None, out=None) -> RunConfig:
    """Read ``path`` and apply overrides (overrides win)."""
    source = str(path)
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"{source}: config file not found") from None
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{source}: cannot parse config: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"{source}: unknown field {sorted(unknown)[0]}")
    raw = json.loads(json.dumps(raw, default=str))
    if profile is not None:
        raw["profile"] = profile
    if seed is not None:
        raw["seed"] = seed

    synth = _section(raw, "synth", SYNTH_KEYS, source)
    forest = _section(raw, "forest", FOREST_KEYS, source)
    rep = _section(raw, "report", REPORT_KEYS, source)
    prof = _profile(raw.get("profile"), source)

    try:
        years = tuple(int(y) for y in raw.get("years", (2016, 2017, 2018)))
        master_seed = int(raw.get("seed", 20210601))
        settings = _settings(forest.get("settings"), source)
        if setting is not None:
            settings = (parse_setting(setting) if isinstance(setting, str) else tuple(setting),)
        audit = AuditConfig(
            profile=prof,
            n_trees=int(forest.get("n_trees", 1000)),
            mtry=int(forest.get("mtry", min(10, prof.n_components))),
            min_node_size=settings[0][0],
            max_leaf_nodes=settings[0][1],
            tree_fraction_threshold=float(forest.get("threshold", 0.01)),
            years=years,
            sample_size=int(synth.get("n_persons", 1_000_000)),
            master_seed=master_seed,
            top_k=int(forest.get("top_k", 10)),
            settings=settings,
        )
        generator = _generator(prof, synth, years, master_seed, audit.sample_size)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None

    n_threads = int(threads if threads is not None else raw.get("threads", 1))
    if n_threads < 1:
        raise ConfigError("--threads: must be >= 1")
    return RunConfig(
        source=source,
        audit=audit,
        generator=generator,
        out=Path(out if out is not None else raw.get("out", "runs")),
        threads=n_threads,
        per_year=bool(rep.get("per_year", False)),
        raw=raw,
    )


def _generator(prof: FormulaProfile, synth: dict[str, Any], years, seed: int, n: int) -> GeneratorSpec:
    planted = []
    for k, item in enumerate(synth.get("planted") or []):
        try:
            sig = GroupSignature.decode(item["signature"], prof.component_labels)
            planted.append(PlantedInteraction(sig, float(item["extra_spend"])))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"synth.planted[{k}]: {exc}") from None
    kwargs: dict[str, Any] = dict(
        n_persons=n,
        years=tuple(years),
        seed=seed,
        planted_interactions=tuple(planted),
        noise=synth.get("noise", "lognormal"),
        noise_scale=float(synth.get("noise_scale", 0.0)),
        market_count=int(synth.get("market_count", 50)),
    )
    if synth.get("market_effects") is not None:
        kwargs["market_effects"] = tuple(float(v) for v in synth["market_effects"])
    if synth.get("base_spend") is not None:
        kwargs["base_spend"] = float(synth["base_spend"])
    if synth.get("hcc_map") is not None:
        kwargs["hcc_map"] = tuple(prof.component_index(v) if isinstance(v, str) else int(v)
                                  for v in synth["hcc_map"])
    try:
        if prof.name == "custom":
            spec = GeneratorSpec(profile=prof, prevalence=dict(synth.get("prevalence") or {}),
                                 condition_effects=dict(synth.get("effects") or {}), **kwargs)
        else:
            spec = default_spec(prof, **kwargs)
            if synth.get("effects") or synth.get("prevalence"):
                spec = replace(spec,
                               condition_effects={**spec.condition_effects, **(synth.get("effects") or {})},
                               prevalence={**spec.prevalence, **(synth.get("prevalence") or {})},
                               prevalence_by_year=None if synth.get("prevalence") else spec.prevalence_by_year)
    except InvalidSpec as exc:
        raise ConfigError(f"synth.{exc}") from None
    return spec
