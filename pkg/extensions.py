# =============================================================================
# EXTENSIONS - extensions.py
# =============================================================================
# Extension objects and process-wide services.
# Initialize extensions here, then bind them in create_app() / the CLI.
#
# Usage:
#   from extensions import cors, configure_logging
# =============================================================================

import logging

from flask_cors import CORS

# =============================================================================
# FLASK-CORS
# =============================================================================
# CORS instance - call cors.init_app(app) in create_app()
cors = CORS()


# =============================================================================
# LOGGING
# =============================================================================
LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def configure_logging(level="INFO"):
    """
    Install one stream handler on the root logger.

    Calling it twice replaces the handler instead of stacking a second one.

    Args:
        level: Level name or number.
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_densevo", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._densevo = True
    root.addHandler(handler)
    root.setLevel(level.upper() if isinstance(level, str) else level)
