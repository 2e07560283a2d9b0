import os
from threading import Thread
from typing import Optional

from flask import Flask, jsonify

from net_protocol import PROTOCOL_VERSION, AffectivelyServer


def create_app(server: Optional[AffectivelyServer] = None) -> Flask:
    """プロトコルサーバーの死活確認ページ"""
    app = Flask("affectively")

    @app.route("/")
    def home():
        # RENDER_GIT_COMMITはRenderが自動設定する。どのコミットが稼働中かを外部から確認できるようにする
        commit = os.environ.get("RENDER_GIT_COMMIT", "unknown")
        return jsonify({
            "status": "alive",
            "protocol": PROTOCOL_VERSION,
            "open_connections": server.open_connections if server is not None else 0,
            "commit": commit,
        })

    return app


def keep_alive(server: Optional[AffectivelyServer], port: int = 10000) -> Thread:
    # ホスティングしているrenderでサーバーが落ちないように、HTTPのポートも開けておく
    app = create_app(server)
    t = Thread(target=lambda: app.run(host="0.0.0.0", port=port), daemon=True)
    t.start()
    return t
