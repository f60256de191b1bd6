"""
Answer route for scene prompts.

`POST /answer` accepts the ScenePrompt wire format, optionally carrying a
structured `query` member, and replies `{answer, chosen_virtual_id?}`.

Modes (app config `ANSWER_MODE`):
    oracle: answer the structured query with nearest-feature reasoning
    echo:   return the question text unchanged (loopback testing)
"""

import logging
from flask import Blueprint, request, jsonify, current_app
from pydantic import ValidationError
from errors import InvalidArgumentError
from processors.backend import answer_oracle, parse_query
from processors.describe import ScenePrompt

answer_bp = Blueprint('answer', __name__)
logger = logging.getLogger(__name__)


@answer_bp.route('/answer', methods=['POST'])
def answer():
    """Answer one scene prompt.

    Returns:
        Tuple[Response, int]:
          - (200) JSON {'answer': str, 'chosen_virtual_id'?: int}
          - (400) JSON {'error': str} for a malformed prompt or query
    """
    payload = request.get_json(silent=True)
    if payload is None:
        return jsonify({'error': 'Request body must be JSON'}), 400

    try:
        prompt = ScenePrompt.from_wire(payload)
        mode = current_app.config.get('ANSWER_MODE', 'oracle')
        if mode == 'echo':
            return jsonify({'answer': prompt.question}), 200

        query = parse_query(prompt.query)
        if query is None:
            return jsonify({'error': "Oracle mode needs a structured 'query' member"}), 400
        result = answer_oracle(prompt, query, prefer_vi=current_app.config.get('PREFER_VI', True))
        logger.info(f"Answered {query.kind} over {len(prompt.objects)} objects: {result.text}")
        return jsonify(result.to_reply()), 200

    except (InvalidArgumentError, ValidationError, KeyError, TypeError, ValueError) as e:
        logger.warning(f"Rejected answer request: {e}")
        return jsonify({'error': str(e)}), 400
