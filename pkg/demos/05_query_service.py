#!/usr/bin/env python3
"""Stand up the HTTP query service and talk to every endpoint.

The service loads one model + index pair at startup and then serves
read-only traffic: health, index statistics, multipart image queries,
and thumbnails of indexed patches. The browser console in ``frontend/``
speaks exactly this JSON contract.
"""

import io
import json
import tempfile
import threading
import urllib.request
from pathlib import Path

from fedsearch import autodiff as ad
from fedsearch import autoencoder as ae
from fedsearch import datasets as ds
from fedsearch import modelio
from fedsearch import retrieval as rt
from fedsearch import service as svc

work = Path(tempfile.mkdtemp(prefix="demo-service-"))

synth = ds.SynthConfig(clients=4, train_per_client=20, val_per_client=5,
                       test_per_client=5, image_size=32, seed=5)
manifests = ds.synth_generate(synth, work / "data")
merged = ds.DatasetManifest(records=[r for m in manifests for r in m.records])
config = ae.AutoencoderConfig(
    image_size=(3, 32, 32), encoder_filters=(8, 16, 32, 64),
    residual_filters=(16, 8, 64), bottleneck_dim=200,
    decoder_filters=(32, 16, 8, 3), seed=5,
)
images, _ = ds.load_split_arrays(merged, "train")
model, _ = ae.train(ae.build_model(config), images, epochs=8,
                    optimizer=ad.adam(1e-3), batch_size=16)
index = rt.build_index(model, merged)
modelio.save_model(model, work / "model.fcwb")
rt.save_index(index, work / "index.fcix")

state = svc.load_state(work / "model.fcwb", work / "index.fcix", data_root=work / "data")
server = svc.make_server(state, "127.0.0.1", 0)
port = server.server_address[1]
threading.Thread(target=server.serve_forever, daemon=True).start()
base = f"http://127.0.0.1:{port}"
print(f"service listening on {base}\n")


def get(path):
    with urllib.request.urlopen(base + path) as response:
        return json.loads(response.read())


print("GET /healthz      ->", get("/healthz"))
stats = get("/index/stats")
print("GET /index/stats  ->", json.dumps(stats, indent=2))

# Query with a held-out test patch, as the browser console would.
query_record = manifests[0].split_records("test")[0]
png = Path(query_record.path).read_bytes()
boundary = b"demoboundary"
body = b"".join([
    b"--" + boundary + b"\r\n",
    b'Content-Disposition: form-data; name="image"; filename="q.png"\r\n',
    b"Content-Type: image/png\r\n\r\n", png, b"\r\n",
    b"--" + boundary + b"\r\n",
    b'Content-Disposition: form-data; name="k"\r\n\r\n5\r\n',
    b"--" + boundary + b"\r\n",
    b'Content-Disposition: form-data; name="scenario"\r\n\r\nsen1\r\n',
    b"--" + boundary + b"\r\n",
    b'Content-Disposition: form-data; name="magnification"\r\n\r\n'
    + query_record.magnification.encode() + b"\r\n",
    b"--" + boundary + b"--\r\n",
])
request = urllib.request.Request(
    base + "/query", data=body, method="POST",
    headers={"Content-Type": "multipart/form-data; boundary=" + boundary.decode()},
)
with urllib.request.urlopen(request) as response:
    payload = json.loads(response.read())

print(f"\nPOST /query (true label: {query_record.label}, "
      f"{payload['elapsed_seconds']*1000:.1f} ms):")
for rank, hit in enumerate(payload["hits"], 1):
    print(f"  {rank}. {hit['entry_id']:26s} d={hit['distance']:8.3f} "
          f"{hit['label']:9s} thumb={hit['thumbnail_url']}")

thumb = payload["hits"][0]["thumbnail_url"]
with urllib.request.urlopen(base + thumb) as response:
    data = response.read()
is_png = data[:8] == bytes([0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A])
print(f"\nGET {thumb} -> {len(data)} bytes (png: {is_png})")

server.shutdown()
server.server_close()
print("\nservice stopped. start it from the shell with:\n"
      f"  fedsearch serve --model {work}/model.fcwb --index {work}/index.fcix "
      f"--data-root {work}/data --ui-root frontend/dist --listen 127.0.0.1:8080")
