"""
LIDAR-EPW Service
=================

Newline-delimited JSON over TCP so a simulation engine can use the sensor
model as a plugin:
- One JSON request per line: {"frame_id": N, "samples": [ray groups]}
- One JSON response line per request, in request order
- Malformed lines answer {"frame_id": null, "error": "..."} and keep the
  connection open

Ray groups use the dense JSON schema ({"layer", "az", "samples": [{"sub",
"d", "cls", "inc", "epw"}]}). Connections are served on their own threads
and share one read-only SensorModel.

Author: LIDAR-EPW Team
"""

import json
import logging
import socketserver
from typing import Any, Dict, Optional

from .core.echo_select import SensorModel
from .core.frames import ScanFrame, check_frame_id, dense_frame_from_groups
from .errors import DataError, FormatError, LidarEpwError

logger = logging.getLogger(__name__)

DEFAULT_HOST = "127.0.0.1"


def scan_to_wire(frame: ScanFrame) -> Dict[str, Any]:
    """Response object of one scan frame."""
    return {
        "frame_id": frame.frame_id,
        "points": [
            {
                "layer": int(layer),
                "az": int(az),
                "echo": int(echo),
                "distance_m": float(distance),
                "epw_ns": float(epw),
                "cls": int(cls),
            }
            for layer, az, echo, distance, epw, cls in zip(
                frame.layer, frame.azimuth_index, frame.echo, frame.distance, frame.epw, frame.cls
            )
        ],
    }


def handle_request(model: SensorModel, line: str) -> Dict[str, Any]:
    """
    Process one request line.

    Returns:
        Dict[str, Any]: The response object, or an error object when the
        line cannot be processed
    """
    try:
        request = json.loads(line)
        if not isinstance(request, dict) or "frame_id" not in request:
            raise FormatError("request must be an object with a frame_id")
        frame_id = check_frame_id(request["frame_id"])
        groups = request.get("samples", [])
        if not isinstance(groups, list):
            raise FormatError("samples must be a list of ray groups")
        frame = dense_frame_from_groups(frame_id, groups)
        frame.validate(model.spec)
        return scan_to_wire(model.apply(frame))
    except json.JSONDecodeError as e:
        return {"frame_id": None, "error": f"invalid JSON: {e}"}
    except DataError as e:
        return {"frame_id": None, "error": str(e)}
    except LidarEpwError as e:
        logger.warning(f"Request failed: {e}")
        return {"frame_id": None, "error": str(e)}
    except Exception as e:
        logger.exception("Unexpected failure while processing a request")
        return {"frame_id": None, "error": f"internal error: {e}"}


class WireFrameHandler(socketserver.StreamRequestHandler):
    """Sequential request/response loop of one connection."""

    def handle(self) -> None:
        peer = f"{self.client_address[0]}:{self.client_address[1]}"
        logger.info(f"Connection from {peer}")
        served = 0
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            response = handle_request(self.server.model, line)
            self.wfile.write((json.dumps(response, separators=(",", ":")) + "\n").encode("utf-8"))
            self.wfile.flush()
            served += 1
        logger.info(f"Connection from {peer} closed after {served} requests")


class SensorModelServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server holding the shared model."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, model: SensorModel):
        self.model = model
        super().__init__(address, WireFrameHandler)


def create_server(model: SensorModel, port: int, host: str = DEFAULT_HOST) -> SensorModelServer:
    """
    Bind the service; port 0 picks a free port.

    Raises:
        OSError: If the address cannot be bound
    """
    server = SensorModelServer((host, port), model)
    logger.info(f"Sensor model service bound to {host}:{server.server_address[1]}")
    return server


def serve(model: SensorModel, port: int, host: str = DEFAULT_HOST, server: Optional[SensorModelServer] = None) -> None:
    """Serve until interrupted, then shut down cleanly."""
    server = server or create_server(model, port, host)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("Interrupted, shutting down")
    finally:
        server.server_close()
