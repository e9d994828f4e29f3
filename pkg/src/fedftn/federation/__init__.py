"""Server, clients, wire format and transports for federated training."""
from .client import (ClientState, apply_deployment, evaluate_epoch, make_batches, run_client,
                     run_local_epochs, site_adaptation)
from .server import Phase, Server, ServerState, aggregate, check_payload_names, run_server
from .training import FederatedResult, TrainSettings, init_model, make_client, run_federated_training
from .transport import (InProcTransport, SocketClientEndpoint, SocketServer, TrafficLog,
                        parse_address, split_frames)
from .wire import (MAGIC, VERSION, Message, MessageKind, decode_message, deserialize_tree,
                   encode_message, load_checkpoint, save_checkpoint, serialize_tree)
