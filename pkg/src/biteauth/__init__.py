"""Bone-conducted dental-occlusion authentication.

Offline pipeline over 48 kHz binaural captures: denoising frontend,
sub-band spectrum-variance event detection, body-motion filtering,
structural + time-frequency feature extraction, a triplet-trained
embedding network, and two-stage template authentication, plus a
synthetic scene generator used as ground truth throughout the test
suite and the CLI.
"""

from .config import Config, ConfigError, load_config, dump_config
from .frontend import SAMPLE_RATE, StereoCapture
from .features import FeatureBundle
from .pipeline import (DetectedEvent, detect_in_capture,
                       occlusion_candidates, extract_bundles)
from .templates import (AuthDecision, AuthReason, AuthThresholds,
                        LockoutState, TemplateStore, UserTemplate,
                        authenticate, build_template,
                        calibrate_auth_thresholds, update_lockout)
from .synth import (SceneScript, ScriptEvent, SyntheticUserProfile,
                    gen_occlusion, gen_distractor, gen_stream,
                    random_profiles)

__version__ = "0.1.0"

__all__ = [
    "Config", "ConfigError", "load_config", "dump_config",
    "SAMPLE_RATE", "StereoCapture", "FeatureBundle",
    "DetectedEvent", "detect_in_capture", "occlusion_candidates",
    "extract_bundles",
    "AuthDecision", "AuthReason", "AuthThresholds", "LockoutState",
    "TemplateStore", "UserTemplate", "authenticate", "build_template",
    "calibrate_auth_thresholds", "update_lockout",
    "SceneScript", "ScriptEvent", "SyntheticUserProfile",
    "gen_occlusion", "gen_distractor", "gen_stream", "random_profiles",
    "__version__",
]
