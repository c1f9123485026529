"""Line-delimited scenario files: one JSON object per line, tag field first.

Every line is a flat map of numeric fields (plus the tag); repeated
structures use numbered prefixes (r0_, r1_, ... for rover observations).
Floats survive the round trip bit-exactly because JSON text keeps the
shortest representation that parses back to the same double.  A missing
optional value is an absent key, never a sentinel.
"""
from __future__ import annotations

import json

import numpy as np

from .gnss import GnssEpoch, RawObservation, SatelliteState
from .imu import ImuNoise, ImuSample
from .sim import (CameraFrame, EpochArrival, ScenarioHeader, TruthState,
                  event_time)
from .vision import CameraIntrinsics, FeatureObservation

FORMAT_NAME = "gnssvio-scenario"
FORMAT_VERSION = 1


class ScenarioFormatError(ValueError):
    """Malformed scenario file; message carries the 1-based line number."""


def _vec(prefix, v):
    return {f"{prefix}{axis}": float(x) for axis, x in zip("xyzw", v)}


def _unvec(m, prefix, n=3):
    return np.array([m[f"{prefix}{axis}"] for axis in "xyzw"[:n]])


def _header_line(h: ScenarioHeader) -> dict:
    out = {"tag": "header", "format": FORMAT_NAME, "version": h.version,
           "duration": float(h.duration), "imu_rate": float(h.imu_rate),
           "camera_rate": float(h.camera_rate), "gnss_rate": float(h.gnss_rate),
           "gnss_latency": float(h.gnss_latency),
           "n_constellations": int(h.n_constellations),
           "anchor_lat": float(h.anchor_lat), "anchor_lon": float(h.anchor_lon),
           "anchor_height": float(h.anchor_height),
           "frame_yaw": float(h.frame_yaw), "gravity": float(h.gravity),
           "scale": float(h.scale), "pixel_sigma": float(h.pixel_sigma),
           "sigma_pr": float(h.sigma_pr), "sigma_dop": float(h.sigma_dop),
           "sigma_cp": float(h.sigma_cp), "tropo_scale": float(h.tropo_scale),
           "iono_scale": float(h.iono_scale),
           "clock_drift": float(h.clock_drift),
           "gyro_white": float(h.imu_noise.gyro_white),
           "accel_white": float(h.imu_noise.accel_white),
           "gyro_walk": float(h.imu_noise.gyro_walk),
           "accel_walk": float(h.imu_noise.accel_walk),
           "fx": float(h.intrinsics.focal[0]), "fy": float(h.intrinsics.focal[1]),
           "cx": float(h.intrinsics.principal[0]),
           "cy": float(h.intrinsics.principal[1]),
           "width": int(h.intrinsics.resolution[0]),
           "height": int(h.intrinsics.resolution[1])}
    for i, f in enumerate(h.frequencies):
        out[f"freq{i}"] = float(f)
    for i, b in enumerate(h.base_clock):
        out[f"base_clock{i}"] = float(b)
    for i, b in enumerate(h.clock_bias0):
        out[f"clock_bias{i}"] = float(b)
    out.update(_vec("origin_", h.ned_origin))
    out.update(_vec("base_", h.base_position))
    out.update(_vec("lever_", h.lever))
    out.update(_vec("cam_r", h.cam_rotvec))
    out.update(_vec("cam_p", h.cam_p))
    return out


def _parse_header(m: dict) -> ScenarioHeader:
    n = int(m["n_constellations"])
    return ScenarioHeader(
        version=int(m["version"]), duration=m["duration"],
        imu_rate=m["imu_rate"], camera_rate=m["camera_rate"],
        gnss_rate=m["gnss_rate"], gnss_latency=m["gnss_latency"],
        n_constellations=n,
        frequencies=tuple(m[f"freq{i}"] for i in range(n)),
        anchor_lat=m["anchor_lat"], anchor_lon=m["anchor_lon"],
        anchor_height=m["anchor_height"], frame_yaw=m["frame_yaw"],
        ned_origin=_unvec(m, "origin_"), base_position=_unvec(m, "base_"),
        base_clock=np.array([m[f"base_clock{i}"] for i in range(n)]),
        lever=_unvec(m, "lever_"), cam_rotvec=_unvec(m, "cam_r"),
        cam_p=_unvec(m, "cam_p"), gravity=m["gravity"], scale=m["scale"],
        intrinsics=CameraIntrinsics(focal=(m["fx"], m["fy"]),
                                    principal=(m["cx"], m["cy"]),
                                    resolution=(int(m["width"]),
                                                int(m["height"]))),
        pixel_sigma=m["pixel_sigma"], sigma_pr=m["sigma_pr"],
        sigma_dop=m["sigma_dop"], sigma_cp=m["sigma_cp"],
        tropo_scale=m["tropo_scale"], iono_scale=m["iono_scale"],
        imu_noise=ImuNoise(gyro_white=m["gyro_white"],
                           accel_white=m["accel_white"],
                           gyro_walk=m["gyro_walk"],
                           accel_walk=m["accel_walk"]),
        clock_bias0=np.array([m[f"clock_bias{i}"] for i in range(n)]),
        clock_drift=m["clock_drift"])


def _obs_fields(prefix: str, obs: RawObservation) -> dict:
    sat = obs.sat
    out = {f"{prefix}const": int(sat.id[0]), f"{prefix}prn": int(sat.id[1]),
           f"{prefix}cb": float(sat.clock_bias), f"{prefix}cd": float(sat.clock_drift),
           f"{prefix}wl": float(sat.wavelength), f"{prefix}pr": float(obs.pseudorange),
           f"{prefix}dop": float(obs.doppler), f"{prefix}spr": float(obs.sigma_pr),
           f"{prefix}sdp": float(obs.sigma_dop), f"{prefix}scp": float(obs.sigma_cp),
           f"{prefix}ion": float(obs.iono)}
    out.update(_vec(f"{prefix}p", sat.position))
    out.update(_vec(f"{prefix}v", sat.velocity))
    if obs.carrier_phase is not None:
        out[f"{prefix}cp"] = float(obs.carrier_phase)
    return out


def _parse_obs(m: dict, prefix: str) -> RawObservation:
    sat = SatelliteState(id=(int(m[f"{prefix}const"]), int(m[f"{prefix}prn"])),
                         position=_unvec(m, f"{prefix}p"),
                         velocity=_unvec(m, f"{prefix}v"),
                         clock_bias=m[f"{prefix}cb"],
                         clock_drift=m[f"{prefix}cd"],
                         wavelength=m[f"{prefix}wl"])
    return RawObservation(sat=sat, pseudorange=m[f"{prefix}pr"],
                          doppler=m[f"{prefix}dop"],
                          carrier_phase=m.get(f"{prefix}cp"),
                          sigma_pr=m[f"{prefix}spr"],
                          sigma_dop=m[f"{prefix}sdp"],
                          sigma_cp=m[f"{prefix}scp"], iono=m[f"{prefix}ion"])


def _event_line(event) -> dict:
    if isinstance(event, ImuSample):
        out = {"tag": "imu", "t": float(event.t)}
        out.update(_vec("g", event.gyro))
        out.update(_vec("a", event.accel))
        return out
    if isinstance(event, TruthState):
        out = {"tag": "truth", "t": float(event.t),
               "cd": float(event.clock_drift)}
        out.update(_vec("q", event.q))
        out.update(_vec("p", event.p))
        out.update(_vec("v", event.v))
        out.update(_vec("ba", event.ba))
        out.update(_vec("bg", event.bg))
        for i, b in enumerate(event.clock_bias):
            out[f"cb{i}"] = float(b)
        return out
    if isinstance(event, CameraFrame):
        out = {"tag": "cam", "t": float(event.t), "step": int(event.step),
               "n": len(event.observations)}
        for i, obs in enumerate(event.observations):
            out[f"f{i}"] = int(obs.feature_id)
            out[f"u{i}"] = float(obs.pixel[0])
            out[f"v{i}"] = float(obs.pixel[1])
            out[f"s{i}"] = float(obs.sigma_px)
        return out
    if isinstance(event, EpochArrival):
        epoch = event.epoch
        out = {"tag": "gnss", "t": float(epoch.time),
               "arrival": float(event.arrival),
               "nr": len(epoch.rover_obs)}
        for i, obs in enumerate(epoch.rover_obs):
            out.update(_obs_fields(f"r{i}_", obs))
        if epoch.base_position is not None:
            out.update(_vec("bp", epoch.base_position))
            out["nb"] = len(epoch.base_obs)
            for i, obs in enumerate(epoch.base_obs):
                out.update(_obs_fields(f"b{i}_", obs))
            for i, b in enumerate(epoch.base_clock):
                out[f"bc{i}"] = float(b)
        if epoch.spp_pos is not None:
            out.update(_vec("sp", epoch.spp_pos))
            out.update(_vec("sv", epoch.spp_vel))
            out["ssp"] = float(epoch.spp_sigma_pos)
            out["ssv"] = float(epoch.spp_sigma_vel)
        if epoch.dd_ambiguities is not None:
            out["nd"] = len(epoch.dd_ambiguities)
            for i, ((sat, ref), n_dd) in enumerate(
                    sorted(epoch.dd_ambiguities.items())):
                out[f"d{i}_c"], out[f"d{i}_p"] = int(sat[0]), int(sat[1])
                out[f"d{i}_rc"], out[f"d{i}_rp"] = int(ref[0]), int(ref[1])
                out[f"d{i}_n"] = int(n_dd)
        return out
    raise TypeError(f"cannot serialize event {type(event)!r}")


def _parse_event(m: dict):
    tag = m["tag"]
    if tag == "imu":
        return ImuSample(t=m["t"], gyro=_unvec(m, "g"), accel=_unvec(m, "a"))
    if tag == "truth":
        biases = []
        while f"cb{len(biases)}" in m:
            biases.append(m[f"cb{len(biases)}"])
        return TruthState(t=m["t"], q=_unvec(m, "q", 4), p=_unvec(m, "p"),
                          v=_unvec(m, "v"), ba=_unvec(m, "ba"),
                          bg=_unvec(m, "bg"), clock_bias=np.array(biases),
                          clock_drift=m["cd"])
    if tag == "cam":
        obs = [FeatureObservation(feature_id=int(m[f"f{i}"]),
                                  clone_id=int(m["step"]),
                                  pixel=np.array([m[f"u{i}"], m[f"v{i}"]]),
                                  sigma_px=m[f"s{i}"])
               for i in range(int(m["n"]))]
        return CameraFrame(t=m["t"], step=int(m["step"]), observations=obs)
    if tag == "gnss":
        rover = [_parse_obs(m, f"r{i}_") for i in range(int(m["nr"]))]
        base_obs = base_pos = base_clock = dd = None
        if "bpx" in m:
            base_pos = _unvec(m, "bp")
            base_obs = [_parse_obs(m, f"b{i}_") for i in range(int(m["nb"]))]
            clocks = []
            while f"bc{len(clocks)}" in m:
                clocks.append(m[f"bc{len(clocks)}"])
            base_clock = np.array(clocks)
        if "nd" in m:
            dd = {((int(m[f"d{i}_c"]), int(m[f"d{i}_p"])),
                   (int(m[f"d{i}_rc"]), int(m[f"d{i}_rp"]))): int(m[f"d{i}_n"])
                  for i in range(int(m["nd"]))}
        spp_pos = _unvec(m, "sp") if "spx" in m else None
        epoch = GnssEpoch(time=m["t"], rover_obs=rover, base_obs=base_obs,
                          base_position=base_pos, base_clock=base_clock,
                          dd_ambiguities=dd, spp_pos=spp_pos,
                          spp_vel=_unvec(m, "sv") if "svx" in m else None,
                          spp_sigma_pos=m.get("ssp", 0.0),
                          spp_sigma_vel=m.get("ssv", 0.0))
        return EpochArrival(arrival=m["arrival"], epoch=epoch)
    raise ScenarioFormatError(f"unknown event tag {tag!r}")


def write_scenario(path, header: ScenarioHeader, events) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header_line(header)) + "\n")
        for event in events:
            fh.write(json.dumps(_event_line(event)) + "\n")


def read_scenario(path):
    """Returns (header, events); an empty file is an empty stream."""
    header, events = None, []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                m = json.loads(line)
            except json.JSONDecodeError as err:
                raise ScenarioFormatError(f"line {ln}: {err}") from err
            if not isinstance(m, dict) or "tag" not in m:
                raise ScenarioFormatError(f"line {ln}: record without a tag")
            try:
                if m["tag"] == "header":
                    if m.get("format") != FORMAT_NAME:
                        raise ScenarioFormatError(
                            f"line {ln}: not a {FORMAT_NAME} file")
                    header = _parse_header(m)
                else:
                    if header is None:
                        raise ScenarioFormatError(
                            f"line {ln}: event before header")
                    events.append(_parse_event(m))
            except ScenarioFormatError:
                raise
            except (KeyError, ValueError, TypeError) as err:
                raise ScenarioFormatError(f"line {ln}: {err}") from err
    return header, events


def scenario_arrival_times(events) -> np.ndarray:
    return np.array([event_time(e) for e in events])
