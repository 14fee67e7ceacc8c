"""Shipped demo applications.

Three mirror common serverless topologies at reduced fidelity (a retail
platform with twelve functions, a linear deployment pipeline, and a
map-reduce job with input-dependent fan-out); the photo app is the small
storage-triggered demo the attack scenarios target; the credential app
exercises secret decoupling; the burst app hammers one endpoint for rate
limiting.
"""

from __future__ import annotations

from ..credential import CredentialPolicy, MessageTemplate
from ..controller import RateLimitEntry
from ..model import HttpOp
from .appspec import (
    AppSpec,
    FunctionSpec,
    InputSpec,
    ResponseRule,
    ReturnDirective,
    SendDirective,
    SendEachDirective,
    ServiceSpec,
    TriggerRule,
)

GET = HttpOp.GET
POST = HttpOp.POST
PUT = HttpOp.PUT


def photo_app() -> AppSpec:
    """Storage-triggered thumbnail pipeline: an upload to object storage
    triggers the processing function."""
    return AppSpec(
        name="photo",
        entry_functions=("UpdatePhoto",),
        functions=(
            FunctionSpec(
                name="UpdatePhoto",
                source="user",
                script=(
                    SendDirective(
                        url="https://s3.local/photos/upload",
                        op=PUT,
                        repeat="$photos",
                        body='{"photo":"bytes-{n}"}',
                    ),
                    ReturnDirective(),
                ),
            ),
            FunctionSpec(
                name="ProcessPhoto",
                source="s3.local",
                script=(
                    SendDirective(url="https://s3.local/photos/upload", op=GET),
                    SendDirective(
                        url="https://dynamo.local/thumbnails/item",
                        op=PUT,
                        body='{"thumb":"bytes"}',
                    ),
                    ReturnDirective(),
                ),
            ),
        ),
        services=(
            ServiceSpec(
                name="s3.local",
                base_url="https://s3.local",
                responses=(
                    ResponseRule(op=PUT, path_prefix="/", body='{"etag":"1"}'),
                    ResponseRule(op=GET, path_prefix="/", body='{"photo":"bytes"}'),
                ),
                triggers=(
                    TriggerRule(op=PUT, path_prefix="/photos/", target="ProcessPhoto"),
                ),
            ),
            ServiceSpec(
                name="dynamo.local",
                base_url="https://dynamo.local",
                responses=(ResponseRule(op=PUT, path_prefix="/", body='{"ok":true}'),),
            ),
        ),
        input_model={"photos": InputSpec(kind="int", params={"min": 1, "max": 3})},
    )


def pipeline_app() -> AppSpec:
    """Linear deployment pipeline driven by an orchestration service; every
    round produces the same flows (the constant-flow fixture).  The last
    function makes no outbound requests at all."""
    return AppSpec(
        name="pipeline",
        entry_functions=("CheckSource",),
        functions=(
            FunctionSpec(
                name="CheckSource",
                source="user",
                script=(
                    SendDirective(url="https://git.local/repo/head", op=GET),
                    SendDirective(url="https://steps.local/advance/create", op=POST),
                    ReturnDirective(),
                ),
            ),
            FunctionSpec(
                name="CreateChangeSet",
                source="steps.local",
                script=(
                    SendDirective(url="https://git.local/repo/archive", op=GET),
                    SendDirective(
                        url="https://cfn.local/changeset",
                        op=PUT,
                        body='{"template":"stack"}',
                    ),
                    SendDirective(url="https://steps.local/advance/execute", op=POST),
                    ReturnDirective(),
                ),
            ),
            FunctionSpec(
                name="ExecuteChangeSet",
                source="steps.local",
                script=(
                    SendDirective(url="https://cfn.local/execute", op=POST),
                    ReturnDirective(),
                ),
            ),
            FunctionSpec(
                name="NotifyDone",
                source="cfn.local",
                script=(ReturnDirective(),),
            ),
        ),
        services=(
            ServiceSpec(
                name="git.local",
                base_url="https://git.local",
                responses=(
                    ResponseRule(op=GET, path_prefix="/", body='{"commit":"abc"}'),
                ),
            ),
            ServiceSpec(
                name="steps.local",
                base_url="https://steps.local",
                triggers=(
                    TriggerRule(
                        op=POST, path_prefix="/advance/create", target="CreateChangeSet"
                    ),
                    TriggerRule(
                        op=POST,
                        path_prefix="/advance/execute",
                        target="ExecuteChangeSet",
                    ),
                ),
            ),
            ServiceSpec(
                name="cfn.local",
                base_url="https://cfn.local",
                responses=(
                    ResponseRule(op=PUT, path_prefix="/", body='{"id":"cs-1"}'),
                ),
                triggers=(
                    TriggerRule(op=POST, path_prefix="/execute", target="NotifyDone"),
                ),
            ),
        ),
        input_model={},
    )


def mapreduce_app() -> AppSpec:
    """Word-count style job: the coordinator fans out over a queue, each
    mapper downloads an input-dependent set of files sharing a URL prefix."""
    return AppSpec(
        name="mapreduce",
        entry_functions=("Coordinator",),
        functions=(
            FunctionSpec(
                name="Coordinator",
                source="user",
                script=(
                    SendDirective(url="https://s3.local/config/job", op=GET),
                    SendDirective(
                        url="https://queue.local/tasks",
                        op=POST,
                        repeat="$reducers",
                        body='{"task":{n}}',
                    ),
                    ReturnDirective(),
                ),
            ),
            FunctionSpec(
                name="Mapper",
                source="queue.local",
                script=(
                    SendEachDirective(urls_key="$file_urls", op=GET),
                    SendDirective(
                        url="https://s3.local/tmp/shuffle",
                        op=PUT,
                        body='{"counts":{}}',
                    ),
                    ReturnDirective(),
                ),
            ),
            FunctionSpec(
                name="Reducer",
                source="s3.local",
                script=(
                    SendDirective(url="https://s3.local/tmp/shuffle", op=GET),
                    SendDirective(
                        url="https://s3.local/out/result",
                        op=PUT,
                        body='{"words":0}',
                    ),
                    ReturnDirective(),
                ),
            ),
        ),
        services=(
            ServiceSpec(
                name="s3.local",
                base_url="https://s3.local",
                responses=(
                    ResponseRule(op=GET, path_prefix="/", body='{"data":"rows"}'),
                    ResponseRule(op=PUT, path_prefix="/", body='{"etag":"1"}'),
                ),
                triggers=(
                    TriggerRule(op=PUT, path_prefix="/tmp/", target="Reducer"),
                ),
            ),
            ServiceSpec(
                name="queue.local",
                base_url="https://queue.local",
                responses=(
                    ResponseRule(op=POST, path_prefix="/", body='{"queued":true}'),
                ),
                triggers=(
                    TriggerRule(op=POST, path_prefix="/tasks", target="Mapper"),
                ),
            ),
        ),
        input_model={
            "file_urls": InputSpec(
                kind="url_pool",
                params={
                    "base": "https://s3.local/data/rankings/part",
                    "pool": 9,
                    "pad": 4,
                    "count_min": 1,
                    "count_max": 9,
                },
            ),
            "reducers": InputSpec(kind="int", params={"min": 1, "max": 3}),
        },
    )


def retail_app() -> AppSpec:
    """Event-sourced retail platform with twelve functions and three entry
    points; one function's query count depends on user input, and one
    function is invoked directly (an explicit function-to-function edge)."""
    functions = (
        FunctionSpec(
            name="ProductCreate",
            source="user",
            script=(
                SendDirective(
                    url="https://events.local/stream/product",
                    op=POST,
                    body='{"sku":"p-{n}"}',
                ),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="ProductCatalogBuilder",
            source="events.local",
            script=(
                SendDirective(url="https://dynamo.local/catalog/item", op=PUT),
                SendDirective(url="https://events.local/stream/catalog", op=POST),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="PhotoAssign",
            source="events.local",
            script=(
                SendDirective(url="https://dynamo.local/photographers/list", op=GET),
                SendDirective(
                    url="https://sns.local/notify/photographer", op=POST
                ),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="PhotoReceive",
            source="sns.local",
            script=(
                SendDirective(url="https://s3.local/photos/raw", op=PUT),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="PhotoProcess",
            source="s3.local",
            script=(
                SendDirective(url="https://s3.local/photos/raw", op=GET),
                SendDirective(url="https://s3.local/photos/thumb", op=PUT),
                SendDirective(url="https://dynamo.local/catalog/photo", op=PUT),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="CatalogAudit",
            source="dynamo.local",
            script=(
                SendDirective(url="https://dynamo.local/catalog/item", op=GET),
                SendDirective(url="https://events.local/stream/audit", op=POST),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="AuditLogger",
            source="events.local",
            script=(
                SendDirective(url="https://s3.local/logs/audit", op=PUT),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="InventorySync",
            source="dynamo.local",
            script=(
                SendDirective(url="https://erp.local/stock", op=GET),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="PhotographerRegister",
            source="user",
            script=(
                SendDirective(url="https://dynamo.local/photographers/item", op=PUT),
                SendDirective(url="https://sns.local/welcome", op=POST),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="WelcomeMailer",
            source="sns.local",
            script=(
                SendDirective(url="https://mail.local/send", op=POST),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="ProductQuery",
            source="user",
            script=(
                SendDirective(url="https://fn.local/price", op=POST),
                SendDirective(
                    url="https://search.local/products/q",
                    op=GET,
                    repeat="$terms",
                ),
                ReturnDirective(),
            ),
        ),
        FunctionSpec(
            name="PriceService",
            source="ProductQuery",
            entry_url="https://fn.local/price",
            script=(
                SendDirective(url="https://dynamo.local/catalog/item", op=GET),
                ReturnDirective(),
            ),
        ),
    )
    services = (
        ServiceSpec(
            name="events.local",
            base_url="https://events.local",
            responses=(
                ResponseRule(op=POST, path_prefix="/", body='{"offset":1}'),
            ),
            triggers=(
                TriggerRule(
                    op=POST,
                    path_prefix="/stream/product",
                    target="ProductCatalogBuilder",
                ),
                TriggerRule(
                    op=POST, path_prefix="/stream/catalog", target="PhotoAssign"
                ),
                TriggerRule(
                    op=POST, path_prefix="/stream/audit", target="AuditLogger"
                ),
            ),
        ),
        ServiceSpec(
            name="dynamo.local",
            base_url="https://dynamo.local",
            responses=(
                ResponseRule(op=PUT, path_prefix="/", body='{"ok":true}'),
                ResponseRule(op=GET, path_prefix="/", body='{"items":[]}'),
            ),
            triggers=(
                TriggerRule(
                    op=PUT, path_prefix="/catalog/item", target="CatalogAudit"
                ),
                TriggerRule(
                    op=PUT, path_prefix="/catalog/photo", target="InventorySync"
                ),
            ),
        ),
        ServiceSpec(
            name="sns.local",
            base_url="https://sns.local",
            responses=(
                ResponseRule(op=POST, path_prefix="/", body='{"sent":true}'),
            ),
            triggers=(
                TriggerRule(
                    op=POST, path_prefix="/notify/", target="PhotoReceive"
                ),
                TriggerRule(op=POST, path_prefix="/welcome", target="WelcomeMailer"),
            ),
        ),
        ServiceSpec(
            name="s3.local",
            base_url="https://s3.local",
            responses=(
                ResponseRule(op=PUT, path_prefix="/", body='{"etag":"1"}'),
                ResponseRule(op=GET, path_prefix="/", body='{"photo":"raw"}'),
            ),
            triggers=(
                TriggerRule(op=PUT, path_prefix="/photos/raw", target="PhotoProcess"),
            ),
        ),
        ServiceSpec(
            name="search.local",
            base_url="https://search.local",
            responses=(
                ResponseRule(op=GET, path_prefix="/", body='{"hits":[]}'),
            ),
        ),
        ServiceSpec(
            name="erp.local",
            base_url="https://erp.local",
            responses=(ResponseRule(op=GET, path_prefix="/", body='{"stock":9}'),),
        ),
        ServiceSpec(
            name="mail.local",
            base_url="https://mail.local",
            responses=(
                ResponseRule(op=POST, path_prefix="/", body='{"queued":true}'),
            ),
        ),
    )
    return AppSpec(
        name="retail",
        entry_functions=("ProductCreate", "PhotographerRegister", "ProductQuery"),
        functions=functions,
        services=services,
        input_model={"terms": InputSpec(kind="int", params={"min": 1, "max": 4})},
    )


REAL_USERNAME = "test"
REAL_PASSWORD = "123456"
REAL_TOKEN = "SekritAccessToken4567890"
AUTH_URL = "https://cognito.local/auth"
DEVICES_URL = "https://cognito.local/devices"
TOKEN_EXTRACTOR = '"AccessToken":"([A-Za-z0-9]+)"'


def credential_app() -> AppSpec:
    """Login flow against a user-pool service: the function holds dummy
    credentials and an obfuscated token; the guard swaps in the real ones."""
    return AppSpec(
        name="credential",
        entry_functions=("AccountManager",),
        functions=(
            FunctionSpec(
                name="AccountManager",
                source="user",
                script=(
                    SendDirective(
                        url=AUTH_URL,
                        op=POST,
                        body=(
                            '{"AuthFlow":"USER_PASSWORD_AUTH",'
                            '"USERNAME":"placeholder_a",'
                            '"PASSWORD":"placeholder_b",'
                            '"ClientId":"client-1"}'
                        ),
                        capture=("token", TOKEN_EXTRACTOR),
                    ),
                    SendDirective(
                        url=DEVICES_URL,
                        op=POST,
                        body='{"AccessToken":"{token}","Limit":10}',
                    ),
                    SendDirective(url="https://status.local/ping", op=GET),
                    ReturnDirective(),
                ),
            ),
        ),
        services=(
            ServiceSpec(
                name="cognito.local",
                base_url="https://cognito.local",
                responses=(
                    ResponseRule(
                        op=POST,
                        path_prefix="/auth",
                        body=(
                            '{"AuthenticationResult":{"AccessToken":"'
                            + REAL_TOKEN
                            + '","ExpiresIn":3600}}'
                        ),
                    ),
                    ResponseRule(
                        op=POST,
                        path_prefix="/devices",
                        body='{"Devices":[],"AccessToken":"{match}"}',
                        echo=TOKEN_EXTRACTOR,
                    ),
                ),
            ),
            ServiceSpec(
                name="status.local",
                base_url="https://status.local",
                responses=(ResponseRule(op=GET, path_prefix="/", body="pong"),),
            ),
        ),
        input_model={},
    )


def credential_policy() -> CredentialPolicy:
    return CredentialPolicy(
        auth_url=AUTH_URL,
        auth_op=POST,
        credentials={"USERNAME": REAL_USERNAME, "PASSWORD": REAL_PASSWORD},
        template=MessageTemplate(
            format="json",
            fields=(
                ("AuthFlow", "original"),
                ("USERNAME", "credential"),
                ("PASSWORD", "credential"),
                ("ClientId", "original"),
            ),
        ),
        token_extractor=TOKEN_EXTRACTOR,
        other_reqs=((DEVICES_URL, POST),),
    )


def credential_api_doc() -> dict:
    """Simplified API description for the user-pool service, used to derive
    the auth message template mechanically."""
    return {
        "service": "cognito.local",
        "operations": [
            {
                "id": "InitiateAuth",
                "url": AUTH_URL,
                "op": "POST",
                "request_body": {
                    "format": "json",
                    "fields": [
                        {"name": "AuthFlow", "type": "string", "required": True},
                        {"name": "USERNAME", "type": "string", "required": True},
                        {"name": "PASSWORD", "type": "string", "required": True},
                        {"name": "ClientId", "type": "string", "required": True},
                    ],
                },
            },
            {
                "id": "ListDevices",
                "url": DEVICES_URL,
                "op": "POST",
                "request_body": {
                    "format": "json",
                    "fields": [
                        {"name": "AccessToken", "type": "string", "required": True},
                        {"name": "Limit", "type": "integer", "required": False},
                    ],
                },
            },
        ],
    }


BURST_URL = "https://api.local/resource"


def burst_app(sends: int = 25, spacing_ns: int = 40_000_000) -> AppSpec:
    """One function hammering one endpoint on a fixed schedule; pair with a
    rate-limit policy to exercise STOP/RESUME."""
    return AppSpec(
        name="burst",
        entry_functions=("Burst",),
        functions=(
            FunctionSpec(
                name="Burst",
                source="user",
                script=(
                    SendDirective(
                        url=BURST_URL,
                        op=GET,
                        repeat=sends,
                        delay_ns=spacing_ns,
                    ),
                    ReturnDirective(),
                ),
            ),
        ),
        services=(
            ServiceSpec(
                name="api.local",
                base_url="https://api.local",
                responses=(ResponseRule(op=GET, path_prefix="/", body="ok"),),
            ),
        ),
        input_model={},
    )


def burst_rate_limit(rate: int = 10) -> RateLimitEntry:
    return RateLimitEntry(function="Burst", pattern=BURST_URL, op=GET, rate=rate)


FIXTURES = {
    "photo": photo_app,
    "pipeline": pipeline_app,
    "mapreduce": mapreduce_app,
    "retail": retail_app,
    "credential": credential_app,
    "burst": burst_app,
}


def load_app(name_or_path: str) -> AppSpec:
    """Resolve a fixture name or a JSON AppSpec file path."""
    if name_or_path in FIXTURES:
        return FIXTURES[name_or_path]()
    return AppSpec.from_json_file(name_or_path)
