# =============================================================================
# DENSEVO RUN BROWSER - app.py
# =============================================================================
# Flask application serving pipeline run artifacts read-only.
#
# - Configuration in config.py
# - Run store in runs.py
# - Extensions in extensions.py
# - All routes in routes/
#
# Start with `python cli.py --out <runs-root> serve` or `python app.py`.
# =============================================================================

import logging

from dotenv import load_dotenv
from flask import Flask

import config
import runs
from extensions import cors
from routes import all_blueprints

logger = logging.getLogger(__name__)


def create_app(runs_root=None):
    """
    Application factory function.

    Args:
        runs_root: Directory of run folders (default config.RUNS_ROOT).

    Returns:
        Flask app instance
    """
    load_dotenv()

    app = Flask(__name__)

    # ==========================================================================
    # CONFIGURATION
    # ==========================================================================
    app.config["RUNS_ROOT"] = str(runs_root or config.RUNS_ROOT)
    app.config["JSON_SORT_KEYS"] = False

    # ==========================================================================
    # EXTENSIONS
    # ==========================================================================
    cors.init_app(app)

    # ==========================================================================
    # RUN STORE
    # ==========================================================================
    runs.init_runs(app.config["RUNS_ROOT"])

    # ==========================================================================
    # REGISTER BLUEPRINTS
    # ==========================================================================
    for bp in all_blueprints:
        app.register_blueprint(bp)

    logger.info("run browser ready, root %s", app.config["RUNS_ROOT"])
    return app


# =============================================================================
# RUN THE APPLICATION
# =============================================================================
if __name__ == "__main__":
    from extensions import configure_logging

    configure_logging("INFO")
    create_app().run(port=config.API_PORT, debug=False)
